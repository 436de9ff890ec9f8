"""Differentiable layer operations.

Each function validates shapes, computes the forward value with numpy,
and registers a backward closure producing exact gradients. Convolution
and pooling scatter gradients through cached flat-index tables so the
accumulation order is fixed (row-major) and runs stay reproducible.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, ValidationError
from .tensor import Tensor, as_tensor, from_op

# clamp applied to probabilities inside bce_loss so log() stays finite
BCE_EPS = 1e-7

_conv_index_cache: dict[tuple, np.ndarray] = {}
_pool_index_cache: dict[tuple, np.ndarray] = {}


def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col_indices(c_in: int, hp: int, wp: int, kh: int, kw: int, stride: int) -> np.ndarray:
    """Flat indices into the padded input for each (c*kh*kw, out_pos) column cell."""
    key = (c_in, hp, wp, kh, kw, stride)
    idx = _conv_index_cache.get(key)
    if idx is None:
        base = np.arange(c_in * hp * wp, dtype=np.int64).reshape(c_in, hp, wp)
        win = sliding_window_view(base, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        # (c, oh, ow, kh, kw) -> (c, kh, kw, oh, ow) -> (c*kh*kw, oh*ow)
        idx = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * kh * kw, -1)
        _conv_index_cache[key] = idx
    return idx


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a [C_in,H,W] input with a [C_out,C_in,kh,kw] kernel."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 3:
        raise DimensionError(f"conv2d input must be [C,H,W], got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be [C_out,C_in,kh,kw], got shape {kernel.shape}")
    c_in, h, w = x.shape
    c_out, kc_in, kh, kw = kernel.shape
    if kc_in != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input has {c_in} channels, kernel expects {kc_in}"
        )
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1:
        raise ValidationError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValidationError(f"conv2d pad must be >= 0, got {pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d kernel ({kh}x{kw}) larger than padded input ({hp}x{wp}) on axes (H, W)"
        )

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    idx = _im2col_indices(c_in, hp, wp, kh, kw, stride)
    cols = xp.reshape(-1)[idx]  # (c_in*kh*kw, L)
    kmat = kernel.data.reshape(c_out, -1)
    oh, ow = _conv_out_dim(h, kh, stride, pad), _conv_out_dim(w, kw, stride, pad)
    out = (kmat @ cols + bias.data[:, None]).reshape(c_out, oh, ow)

    def backward(g: np.ndarray) -> None:
        gmat = g.reshape(c_out, -1)
        if bias.requires_grad:
            bias._accumulate_grad(gmat.sum(axis=1))
        if kernel.requires_grad:
            kernel._accumulate_grad((gmat @ cols.T).reshape(kernel.shape))
        if x.requires_grad:
            dcols = kmat.T @ gmat
            dxp = np.zeros(c_in * hp * wp, dtype=x.dtype)
            np.add.at(dxp, idx.reshape(-1), dcols.reshape(-1))
            dxp = dxp.reshape(c_in, hp, wp)
            if pad:
                dxp = dxp[:, pad:-pad, pad:-pad]
            x._accumulate_grad(dxp)

    return from_op(out, (x, kernel, bias), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); subgradient at 0 is 0."""
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate_grad(g * (x.data > 0))

    return from_op(out, (x,), backward)


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Per-window maximum over [C,H,W]; gradient routes to the first argmax.

    The window clamps to the input extent per axis (a 2x2 window on a 1xW
    input pools 1x2 slices); it is an error only when the window exceeds
    the input in both dimensions.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"maxpool2d input must be [C,H,W], got shape {x.shape}")
    c, h, w = x.shape
    if k > h and k > w:
        raise DimensionError(f"maxpool2d window {k} larger than input ({h}x{w}) on axes (H, W)")
    if stride < 1:
        raise ValidationError(f"maxpool2d stride must be >= 1, got {stride}")
    kh, kw = min(k, h), min(k, w)

    win = sliding_window_view(x.data, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    c_, oh, ow = win.shape[:3]
    flat = np.ascontiguousarray(win).reshape(c_, oh, ow, kh * kw)
    am = np.argmax(flat, axis=3)  # first occurrence in row-major window order
    out = np.take_along_axis(flat, am[..., None], axis=3)[..., 0]

    key = (c, h, w, k, stride)
    idx = _pool_index_cache.get(key)
    if idx is None:
        base = np.arange(c * h * w, dtype=np.int64).reshape(c, h, w)
        idx = np.ascontiguousarray(
            sliding_window_view(base, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        ).reshape(c_, oh, ow, kh * kw)
        _pool_index_cache[key] = idx
    src = np.take_along_axis(idx, am[..., None], axis=3)[..., 0]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            dx = np.zeros(c * h * w, dtype=x.dtype)
            np.add.at(dx, src.reshape(-1), g.reshape(-1))
            x._accumulate_grad(dx.reshape(c, h, w))

    return from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [K,h,w] -> [K]. This is a branch's pooled feature."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool input must be [K,h,w], got shape {x.shape}")
    k, h, w = x.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            scale = np.asarray(1.0 / (h * w), dtype=x.dtype)
            x._accumulate_grad(np.broadcast_to(g[:, None, None] * scale, x.shape))

    return from_op(out, (x,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias with x: [D], weight: [C,D], bias: [C]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 1 or weight.ndim != 2:
        raise DimensionError(
            f"fully_connected expects x:[D], weight:[C,D]; got {x.shape} and {weight.shape}"
        )
    c, d = weight.shape
    if x.shape[0] != d:
        raise DimensionError(f"fully_connected dim mismatch: x has {x.shape[0]}, weight expects {d}")
    if bias.shape != (c,):
        raise DimensionError(f"fully_connected bias must have shape ({c},), got {bias.shape}")
    out = weight.data @ x.data + bias.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate_grad(weight.data.T @ g)
        if weight.requires_grad:
            weight._accumulate_grad(np.outer(g, x.data))
        if bias.requires_grad:
            bias._accumulate_grad(g)

    return from_op(out, (x, weight, bias), backward)


def sigmoid_normalize(p: Tensor) -> Tensor:
    """Elementwise logistic 1/(1+exp(-p)), clamped strictly inside (0,1)."""
    p = as_tensor(p)
    z = p.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    eps = 1e-7 if z.dtype == np.float32 else 1e-12
    np.clip(out, eps, 1.0 - eps, out=out)

    def backward(g: np.ndarray) -> None:
        if p.requires_grad:
            p._accumulate_grad(g * out * (1.0 - out))

    return from_op(out, (p,), backward)


def bce_loss(p_norm: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of normalized probabilities against {0,1} labels.

    Probabilities are clamped to [BCE_EPS, 1-BCE_EPS] before the logs; the
    gradient uses the clamped value, so composed with sigmoid_normalize the
    logit gradient is (p_clamped - l) / C.
    """
    p_norm = as_tensor(p_norm)
    l = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=p_norm.dtype)
    if l.shape != p_norm.shape:
        raise DimensionError(f"bce_loss shape mismatch: p {p_norm.shape} vs labels {l.shape}")
    if not np.all((l == 0) | (l == 1)):
        raise ValidationError("bce_loss labels must be 0 or 1")
    n = p_norm.size
    pc = np.clip(p_norm.data, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(l * np.log(pc) + (1.0 - l) * np.log(1.0 - pc)).sum() / n
    out = np.asarray(loss, dtype=p_norm.dtype).reshape(())

    def backward(g: np.ndarray) -> None:
        if p_norm.requires_grad:
            gg = float(np.asarray(g).reshape(()))
            p_norm._accumulate_grad(gg * (-(l / pc) + (1.0 - l) / (1.0 - pc)) / n)

    return from_op(out, (p_norm,), backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D feature vectors in the given, fixed order."""
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        if p.ndim != 1:
            raise DimensionError(f"concat expects 1-D vectors, got shape {p.shape}")
    out = np.concatenate([p.data for p in parts])
    offsets = np.cumsum([0] + [p.size for p in parts])

    def backward(g: np.ndarray) -> None:
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate_grad(g[a:b])

    return from_op(out, tuple(parts), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate [C_i,H,W] maps along the channel axis (U-Net skip joins)."""
    parts = [as_tensor(p) for p in parts]
    hw = parts[0].shape[1:]
    for p in parts:
        if p.ndim != 3 or p.shape[1:] != hw:
            raise DimensionError(
                f"concat_channels spatial mismatch: {p.shape} vs expected [*,{hw[0]},{hw[1]}]"
            )
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g: np.ndarray) -> None:
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate_grad(g[a:b])

    return from_op(out, tuple(parts), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of [C,H,W]."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"upsample2x input must be [C,H,W], got shape {x.shape}")
    c, h, w = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate_grad(g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return from_op(out, (x,), backward)
