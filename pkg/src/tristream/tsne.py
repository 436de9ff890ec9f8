"""Exact t-SNE for small feature sets (O(n^2), float64 throughout).

Per-point Gaussian bandwidths come from a binary search matching the target
perplexity; the embedding is optimized with early exaggeration, momentum
switching, and per-coordinate gains.

Reordering the inputs must permute the output, bitwise. Two things make
that hold: initial positions derive from a hash of each feature vector
rather than its array index, and every reduction over points sums its
terms in sorted order, so float rounding cannot depend on input order.
The same mechanism keeps duplicated vectors exactly coincident for the
whole run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

MAX_POINTS = 2048
EPS = 1e-12


@dataclass(frozen=True)
class Embedding3D:
    """One embedded point per input vector, with the KL trace endpoints."""

    points: np.ndarray
    labels: tuple
    sample_ids: tuple
    kl_initial: float
    kl_final: float

    def __post_init__(self):
        if self.points.shape[0] != len(self.labels) or len(self.labels) != len(self.sample_ids):
            raise ValidationError("one point, one label, one id per input vector")
        if self.kl_final < 0 or self.kl_initial < 0:
            raise ValidationError("KL divergence cannot be negative")


def _csum(a: np.ndarray, axis=None):
    """Sum in a canonical (sorted) order: the result is a function of the
    value multiset, not the storage order."""
    return np.sort(a, axis=axis).sum(axis=axis)


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    # summed per cell over the feature axis (never BLAS, whose rounding can
    # depend on matrix position), so each entry is an exact function of its
    # own pair of rows
    n, d_feat = x.shape
    d = np.empty((n, n))
    block = max(1, 65536 // max(1, n * d_feat))
    for start in range(0, n, block):
        stop = min(n, start + block)
        diff = x[start:stop, None, :] - x[None, :, :]
        d[start:stop] = np.square(diff).sum(axis=2)
    np.fill_diagonal(d, 0.0)
    return d


def _conditional_p(dists_row: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Row of conditional affinities at precision beta, plus its entropy."""
    p = np.exp(-dists_row * beta)
    s = _csum(p)
    if s <= 0:
        return np.zeros_like(p), 0.0
    p = p / s
    nz = p[p > 0]
    h = float(-_csum(nz * np.log(nz)))
    return p, h


def _search_beta(dists_row: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 64):
    target = np.log(perplexity)
    beta, lo, hi = 1.0, 0.0, np.inf
    p, h = _conditional_p(dists_row, beta)
    for _ in range(max_iter):
        if abs(h - target) < tol:
            break
        if h > target:
            lo = beta
            beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
        else:
            hi = beta
            beta = (beta + lo) / 2.0
        p, h = _conditional_p(dists_row, beta)
    return p


def _joint_p(features: np.ndarray, perplexity: float) -> np.ndarray:
    n = features.shape[0]
    d = _pairwise_sq_dists(features)
    cond = np.zeros((n, n))
    idx = np.arange(n)
    for i in range(n):
        row = d[i, idx != i]
        cond[i, idx != i] = _search_beta(row, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    return np.maximum(p, EPS)


def _q_matrix(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + _pairwise_sq_dists(y))
    np.fill_diagonal(num, 0.0)
    q = num / max(float(_csum(num)), EPS)
    return np.maximum(q, EPS), num


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = ~np.eye(p.shape[0], dtype=bool)
    return float(_csum(p[mask] * np.log(p[mask] / q[mask])))


def _hash_init(features: np.ndarray, dims: int, seed: int) -> np.ndarray:
    y = np.empty((features.shape[0], dims))
    seed_bytes = int(seed).to_bytes(8, "little", signed=True)
    for i, row in enumerate(features):
        digest = hashlib.blake2b(row.tobytes() + seed_bytes, digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        y[i] = rng.standard_normal(dims) * 1e-4
    return y


def tsne_embed(
    features,
    labels=None,
    sample_ids=None,
    perplexity: float = 30.0,
    dims: int = 3,
    iters: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
) -> Embedding3D:
    """Embed feature vectors into `dims` coordinates (default 3)."""
    feats = np.asarray(
        [np.asarray(getattr(f, "data", f), dtype=np.float64).ravel() for f in features]
    )
    n = feats.shape[0]
    if n < 5:
        raise ValidationError(f"need at least 5 points, got {n}")
    if n > MAX_POINTS:
        raise ValidationError(f"exact method capped at {MAX_POINTS} points, got {n}")
    if not 0 < perplexity < n / 3:
        raise ValidationError(f"perplexity must be in (0, n/3); got {perplexity} with n={n}")
    if iters < 1:
        raise ValidationError(f"iters must be >= 1, got {iters}")
    labels = tuple(labels) if labels is not None else tuple([0] * n)
    sample_ids = tuple(sample_ids) if sample_ids is not None else tuple(str(i) for i in range(n))

    p = _joint_p(feats, perplexity)
    y = _hash_init(feats, dims, seed)
    q0, _ = _q_matrix(y)
    kl_initial = _kl(p, q0)

    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(iters):
        p_eff = p * early_exaggeration if it < exaggeration_iters else p
        q, num = _q_matrix(y)
        pq = (p_eff - q) * num
        s = _csum(pq, axis=1)
        # grad_i = 4 * (s_i * y_i - sum_j pq_ij * y_j), summed canonically
        attract = np.stack(
            [_csum(pq * y[:, k][None, :], axis=1) for k in range(dims)], axis=1
        )
        grad = 4.0 * (s[:, None] * y - attract)
        momentum = 0.5 if it < exaggeration_iters else 0.8
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - _csum(y, axis=0) / n

    q_final, _ = _q_matrix(y)
    return Embedding3D(
        points=y,
        labels=labels,
        sample_ids=sample_ids,
        kl_initial=kl_initial,
        kl_final=_kl(p, q_final),
    )
