"""Classification metrics: accuracy, F1, and AUC.

AUC is a sorted threshold sweep with trapezoidal integration, carried out
in integer pair counts so it agrees exactly (not just approximately) with
the Mann-Whitney statistic, ties getting half credit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    scores: tuple
    labels: tuple

    def __post_init__(self):
        if self.tp + self.fp + self.tn + self.fn != len(self.scores):
            raise ValidationError("confusion counts do not sum to dataset size")


def _check_pairs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError(
            f"scores and labels must be equal-length 1-D, got {scores.shape} vs {labels.shape}"
        )
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion(predictions, labels):
    """-> (tp, fp, tn, fn); the positive class is label 1."""
    predictions = np.asarray(predictions, dtype=np.int64)
    _, labels = _check_pairs(predictions.astype(np.float64), labels)
    tp = int(np.sum((predictions == 1) & (labels == 1)))
    fp = int(np.sum((predictions == 1) & (labels == 0)))
    tn = int(np.sum((predictions == 0) & (labels == 0)))
    fn = int(np.sum((predictions == 0) & (labels == 1)))
    return tp, fp, tn, fn


def classification_metrics(scores, labels, threshold: float = 0.5, predictions=None):
    """-> (accuracy, f1, (tp, fp, tn, fn)).

    Decisions come from `predictions` when given (the argmax rule decided
    upstream), otherwise from thresholding the positive-class scores.
    Precision/recall denominators of zero yield F1 = 0.
    """
    scores, labels = _check_pairs(scores, labels)
    if predictions is None:
        predictions = (scores > threshold).astype(np.int64)
    else:
        predictions = np.asarray(predictions, dtype=np.int64)
        if predictions.shape != labels.shape:
            raise ValidationError("predictions length does not match labels")
    tp, fp, tn, fn = confusion(predictions, labels)
    n = len(labels)
    accuracy = (tp + tn) / n if n else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, f1, (tp, fp, tn, fn)


def auc(scores, labels) -> float:
    """Area under the ROC curve via threshold sweep.

    Samples are sorted by descending score; each distinct score value is one
    sweep step, accumulating integer TP/FP counts, and the ROC polygon is
    integrated with the trapezoid rule in integers: ties on the same step
    contribute half credit exactly as the Mann-Whitney statistic does.
    """
    scores, labels = _check_pairs(scores, labels)
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise ValidationError("auc undefined: needs at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    area2 = 0  # twice the unnormalized area, in integer pair counts
    tp_prev = fp_prev = 0
    tp = fp = 0
    i = 0
    n = len(l_sorted)
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            if l_sorted[j] == 1:
                tp += 1
            else:
                fp += 1
            j += 1
        area2 += (fp - fp_prev) * (tp + tp_prev)
        tp_prev, fp_prev = tp, fp
        i = j
    return area2 / (2 * pos * neg)


def mann_whitney_auc(scores, labels) -> float:
    """Direct pair-count statistic: (concordant + 0.5 * tied) / (P * N).

    O(P*N); kept as the independent cross-check for the sweep above.
    """
    scores, labels = _check_pairs(scores, labels)
    pos_scores = scores[labels == 1]
    neg_scores = scores[labels == 0]
    if len(pos_scores) == 0 or len(neg_scores) == 0:
        raise ValidationError("auc undefined: needs at least one positive and one negative")
    greater = np.sum(pos_scores[:, None] > neg_scores[None, :])
    tied = np.sum(pos_scores[:, None] == neg_scores[None, :])
    return (int(greater) + 0.5 * int(tied)) / (len(pos_scores) * len(neg_scores))


def evaluate(scores, labels, threshold: float = 0.5, predictions=None) -> EvalResult:
    """Full result bundle; stores scores so every metric is recomputable."""
    accuracy, f1, (tp, fp, tn, fn) = classification_metrics(
        scores, labels, threshold=threshold, predictions=predictions
    )
    return EvalResult(
        accuracy=accuracy,
        f1=f1,
        auc=auc(scores, labels),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        scores=tuple(float(s) for s in np.asarray(scores, dtype=np.float64)),
        labels=tuple(int(l) for l in np.asarray(labels)),
    )
