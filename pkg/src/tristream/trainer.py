"""Three-stage training protocol with branch freezing.

Stage I fits the global stream. Stage II fits the heat-map and infected
streams (in either order; both read only frozen global outputs). Stage III
fits the fusion head over frozen pooled features. Each stage early-stops
on validation accuracy and hands its best snapshot to the next.

A stage whose upstream branches are frozen precomputes their outputs once
(crops, pooled vectors) instead of re-running them every epoch; that cache
is what makes desk-scale protocol runs cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericalError, ValidationError
from .model import MultiStreamModel, one_hot
from .nn import (
    OptimizerConfig,
    Tensor,
    bce_loss,
    concat,
    global_avg_pool,
    no_grad,
    sgd_step,
    sigmoid_normalize,
)
from .semisup import Segmenter
from .vision import (
    BinaryMask,
    GrayImage,
    bilinear_resize,
    split_infected_lr,
    upsample_mask_nearest,
)

STAGES = ("I", "II-heatmap", "II-infected", "III")
ALL_BRANCHES = ("global", "heatmap", "infected", "fusion")

DEFAULT_EPOCHS = 50
DEFAULT_BATCH = 32
DEFAULT_PATIENCE = 10


@dataclass
class Sample:
    """One training unit: image, class label, optional lesion mask."""

    sample_id: str
    image: GrayImage
    label: int
    mask: Optional[BinaryMask] = None


@dataclass
class TrainData:
    train: list
    val: list

    def __post_init__(self):
        if not self.train or not self.val:
            raise ValidationError("TrainData requires nonempty train and val sets")


@dataclass(frozen=True)
class StagePlan:
    """Which branches train and which stay bitwise intact for one stage."""

    stage: str
    trainable: tuple
    frozen: tuple
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH

    def __post_init__(self):
        if set(self.trainable) & set(self.frozen):
            raise ValidationError("a branch cannot be both trainable and frozen")
        if set(self.trainable) | set(self.frozen) != set(ALL_BRANCHES):
            raise ValidationError("plan must assign every branch")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


def stage_plan(stage: str, epochs: int = DEFAULT_EPOCHS, batch_size: int = DEFAULT_BATCH) -> StagePlan:
    table = {
        "I": ("global",),
        "II-heatmap": ("heatmap",),
        "II-infected": ("infected",),
        "III": ("fusion",),
        "all": ALL_BRANCHES,
    }
    if stage not in table:
        raise ValidationError(f"unknown stage {stage!r}; expected one of {list(table)}")
    trainable = table[stage]
    frozen = tuple(b for b in ALL_BRANCHES if b not in trainable)
    return StagePlan(stage=stage, trainable=trainable, frozen=frozen, epochs=epochs, batch_size=batch_size)


@dataclass(frozen=True)
class EarlyStopPolicy:
    metric: str = "val_accuracy"
    patience: int = DEFAULT_PATIENCE

    def __post_init__(self):
        if self.metric != "val_accuracy":
            raise ValidationError(f"unsupported early-stop metric {self.metric!r}")
        if self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: float


@dataclass(frozen=True)
class StageHistory:
    stage: str
    records: tuple
    best_epoch: int
    stopped_early: bool

    def best_val_accuracy(self) -> float:
        return self.records[self.best_epoch - 1].val_accuracy


def select_best(records, policy: EarlyStopPolicy = EarlyStopPolicy()) -> int:
    """Epoch (1-indexed) with the highest validation accuracy; earliest wins ties."""
    if not records:
        raise ValidationError("select_best: empty history")
    best = max(records, key=lambda r: (r.val_accuracy, -r.epoch))
    return best.epoch


def resolve_mask(sample: Sample, segmenter: Optional[Segmenter]) -> BinaryMask:
    """The sample's own mask, the segmenter's prediction, or all-zeros."""
    if sample.mask is not None:
        return sample.mask
    h, w = sample.image.pixels.shape
    if segmenter is None:
        return BinaryMask(np.zeros((h, w), dtype=np.uint8))
    if (h, w) == (segmenter.input_size, segmenter.input_size):
        return segmenter.predict_mask(sample.image)
    resized = GrayImage(bilinear_resize(sample.image.pixels, segmenter.input_size, segmenter.input_size))
    return upsample_mask_nearest(segmenter.predict_mask(resized), h, w)


class _StageCache:
    """Per-sample frozen-branch outputs for one stage run."""

    def __init__(self):
        self.crop = {}        # sample_id -> GrayImage (heat-map branch input)
        self.lr_crops = {}    # sample_id -> (GrayImage, GrayImage)
        self.pool = {}        # sample_id -> {"g"|"h"|"in": np.ndarray}
        self.mask = {}        # sample_id -> BinaryMask


def _build_cache(model, samples, stage, segmenter) -> _StageCache:
    cache = _StageCache()
    if stage in ("I", "all"):
        # nothing upstream is frozen; masks are still fixed inputs
        for s in samples:
            cache.mask[s.sample_id] = resolve_mask(s, segmenter)
        return cache
    with no_grad():
        for s in samples:
            acts, pool_g, _ = model.forward_global(s.image)
            cache.pool.setdefault(s.sample_id, {})["g"] = pool_g.data.copy()
            mask = resolve_mask(s, segmenter)
            cache.mask[s.sample_id] = mask
            if stage == "II-heatmap":
                crop, _ = model.heatmap_crop(s.image, acts)
                cache.crop[s.sample_id] = crop
            elif stage == "II-infected":
                left, right, _ = split_infected_lr(mask, s.image, model.config.input_size)
                cache.lr_crops[s.sample_id] = (left, right)
            elif stage == "III":
                pool_h, _ = model.forward_heatmap(s.image, acts)
                pool_in, _ = model.forward_infected(s.image, mask, pool_g)
                cache.pool[s.sample_id]["h"] = pool_h.data.copy()
                cache.pool[s.sample_id]["in"] = pool_in.data.copy()
    return cache


def _stage_logits(model, sample, stage, cache):
    """Logits of the branch this stage optimizes, using cached frozen inputs."""
    sid = sample.sample_id
    if stage == "I":
        _, _, logits = model.forward_global(sample.image)
        return logits
    if stage == "II-heatmap":
        crop = cache.crop[sid]
        acts = model.heatmap_branch.backbone.forward(Tensor(crop.pixels[None, :, :]))
        pool_h = global_avg_pool(acts)
        return model.heatmap_branch.head(pool_h)
    if stage == "II-infected":
        left, right = cache.lr_crops[sid]
        pool_l = global_avg_pool(model.infected_branch.backbone.forward(Tensor(left.pixels[None, :, :])))
        pool_r = global_avg_pool(model.infected_branch.backbone.forward(Tensor(right.pixels[None, :, :])))
        pool_in = concat([pool_l, pool_r, Tensor(cache.pool[sid]["g"])])
        return model.infected_branch.head(pool_in)
    if stage == "III":
        pools = cache.pool[sid]
        return model.forward_fusion(Tensor(pools["g"]), Tensor(pools["h"]), Tensor(pools["in"]))
    raise ValidationError(f"unknown stage {stage!r}")


def _all_branch_losses(model, sample, cache):
    out = model.forward_all(sample.image, cache.mask[sample.sample_id])
    target = Tensor(one_hot(sample.label, model.num_classes))
    losses = []
    for name in ("global", "heatmap", "infected", "fusion"):
        losses.append(bce_loss(sigmoid_normalize(out["logits"][name]), target))
    return losses, out["logits"]["fusion"]


def _sample_loss(model, sample, stage, cache):
    """-> (list of loss tensors, logits used for the accuracy metric)"""
    if stage == "all":
        return _all_branch_losses(model, sample, cache)
    logits = _stage_logits(model, sample, stage, cache)
    target = Tensor(one_hot(sample.label, model.num_classes))
    return [bce_loss(sigmoid_normalize(logits), target)], logits


def _val_accuracy(model, samples, stage, cache) -> float:
    correct = 0
    with no_grad():
        for s in samples:
            if stage == "all":
                _, logits = _all_branch_losses(model, s, cache)
            else:
                logits = _stage_logits(model, s, stage, cache)
            correct += int(model.predict(logits) == s.label)
    return correct / len(samples)


def run_stage(
    model: MultiStreamModel,
    plan: StagePlan,
    data: TrainData,
    opt: OptimizerConfig = None,
    policy: EarlyStopPolicy = EarlyStopPolicy(),
    seed: int = 0,
    segmenter: Optional[Segmenter] = None,
) -> StageHistory:
    """Train one stage with early stopping; leaves the model holding the
    best-epoch weights. Frozen branches stay bitwise intact throughout."""
    if opt is None:
        opt = OptimizerConfig()
    model.set_frozen(ALL_BRANCHES, False)
    model.set_frozen(plan.frozen, True)
    trainable = [p for p in model.parameters() if not p.frozen]
    for p in trainable:
        p.momentum_buffer[:] = 0.0

    cache = _build_cache(model, data.train + data.val, plan.stage, segmenter)
    rng = np.random.default_rng(seed)
    records = []
    best_acc, best_epoch = -1.0, 0
    best_snap = None
    stopped_early = False

    for epoch in range(1, plan.epochs + 1):
        lr = opt.lr_at_epoch(epoch)
        order = rng.permutation(len(data.train))
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, len(order), plan.batch_size):
            batch = order[start : start + plan.batch_size]
            for p in trainable:
                p.value.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                sample = data.train[int(idx)]
                losses, _ = _sample_loss(model, sample, plan.stage, cache)
                for loss in losses:
                    loss.backward(np.full(loss.shape, 1.0 / len(batch), dtype=np.float32))
                    batch_loss += loss.item() / len(batch)
            if not np.isfinite(batch_loss):
                raise NumericalError(
                    f"stage {plan.stage}: non-finite loss at epoch {epoch}, "
                    f"batch {n_batches + 1}"
                )
            sgd_step(trainable, cfg=opt, lr=lr)
            epoch_loss += batch_loss
            n_batches += 1
        val_acc = _val_accuracy(model, data.val, plan.stage, cache)
        records.append(
            EpochRecord(epoch=epoch, lr=lr, train_loss=epoch_loss / n_batches, val_accuracy=val_acc)
        )
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_snap = [p.value.data.copy() for p in trainable]
        elif epoch - best_epoch >= policy.patience:
            stopped_early = True
            break

    for p, snap in zip(trainable, best_snap):
        p.value.data[:] = snap
    model.set_frozen(ALL_BRANCHES, False)
    return StageHistory(
        stage=plan.stage, records=tuple(records), best_epoch=best_epoch, stopped_early=stopped_early
    )


def split_validation(samples, frac: float = 0.2, seed: int = 0) -> TrainData:
    """Stratified train/val split; every class contributes to both sides."""
    if not 0.0 < frac < 1.0:
        raise ValidationError(f"frac must be in (0,1), got {frac}")
    rng = np.random.default_rng(seed)
    by_label = {}
    for s in samples:
        by_label.setdefault(s.label, []).append(s)
    train, val = [], []
    for label in sorted(by_label):
        group = by_label[label]
        order = rng.permutation(len(group))
        n_val = max(1, int(round(frac * len(group))))
        if n_val >= len(group):
            raise ValidationError(f"class {label}: too few samples to split")
        for i, idx in enumerate(order):
            (val if i < n_val else train).append(group[int(idx)])
    return TrainData(train=train, val=val)


@dataclass(frozen=True)
class ProtocolResult:
    histories: tuple

    def history(self, stage: str) -> StageHistory:
        for h in self.histories:
            if h.stage == stage:
                return h
        raise KeyError(stage)


def run_protocol(
    model: MultiStreamModel,
    data: TrainData,
    opt: OptimizerConfig = None,
    epochs: int = DEFAULT_EPOCHS,
    batch_size: int = DEFAULT_BATCH,
    policy: EarlyStopPolicy = EarlyStopPolicy(),
    seed: int = 0,
    segmenter: Optional[Segmenter] = None,
    stages=STAGES,
) -> ProtocolResult:
    """Run the staged protocol (or a custom stage list, e.g. ("all",) for the
    joint-training ablation). The model ends up holding each stage's best
    weights."""
    # stage seeds key on the stage name, not its position, so that the two
    # Stage II branches give identical results in either order
    stage_ids = {"I": 0, "II-heatmap": 1, "II-infected": 2, "III": 3, "all": 4}
    histories = []
    for stage in stages:
        plan = stage_plan(stage, epochs=epochs, batch_size=batch_size)
        hist = run_stage(
            model, plan, data, opt=opt, policy=policy,
            seed=int(np.random.SeedSequence([seed, stage_ids[stage]]).generate_state(1)[0]),
            segmenter=segmenter,
        )
        histories.append(hist)
    return ProtocolResult(histories=tuple(histories))
