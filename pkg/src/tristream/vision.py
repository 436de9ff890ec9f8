"""Spatial operations: heat-map normalization, mask binarization, connected
components, bounding boxes, bilinear crop/resize, and the left/right
infected-region split.

Everything here is a pure function over small immutable value types, safe
for unrestricted concurrent use.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import EmptyRegionError, ValidationError


@dataclass(frozen=True)
class GrayImage:
    """Grayscale image; pixels are float32 in [0,1], row-major, clamped on construction."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float32)
        if arr.ndim != 2:
            raise ValidationError(f"GrayImage pixels must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "pixels", np.clip(arr, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class HeatMap:
    """Real-valued spatial map; in [0,1] when produced by heatmap_normalize."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 2:
            raise ValidationError(f"HeatMap values must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """0/1 cells matching the dimensions of the map or image it came from."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise ValidationError(f"BinaryMask bits must be 2-D, got shape {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValidationError("BinaryMask cells must be 0 or 1")
        object.__setattr__(self, "bits", arr.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with inclusive row/col bounds."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValidationError(
                f"degenerate BoundingBox: rows [{self.row_min},{self.row_max}] "
                f"cols [{self.col_min},{self.col_max}]"
            )

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1


class SplitFlags(NamedTuple):
    left_fallback: bool
    right_fallback: bool


def heatmap_normalize(activations) -> HeatMap:
    """Channel-sum S then H = (S - min S) / max S; all-zero S maps to H = 0.

    Requires nonnegative activations (the upstream relu guarantees this),
    which is exactly what keeps H inside [0,1] despite the denominator
    being max rather than max - min.
    """
    data = np.asarray(getattr(activations, "data", activations), dtype=np.float64)
    if data.ndim != 3:
        raise ValidationError(f"activations must be [K,h,w], got shape {data.shape}")
    if data.min() < 0:
        raise ValidationError("heatmap_normalize requires nonnegative activations")
    s = data.sum(axis=0)
    mx = s.max()
    if mx == 0:
        return HeatMap(np.zeros_like(s, dtype=np.float32))
    return HeatMap(((s - s.min()) / mx).astype(np.float32))


def binarize(h: HeatMap, tau: float) -> BinaryMask:
    """Strict threshold: cell is 1 iff H(x,y) > tau. Smaller tau, larger mask."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must be in [0,1], got {tau}")
    return BinaryMask((h.values > tau).astype(np.uint8))


_NEIGHBORS_8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def connected_components(mask: BinaryMask) -> list[np.ndarray]:
    """All 8-connected components of 1-cells, each as a 0/1 array."""
    bits = mask.bits
    h, w = bits.shape
    seen = np.zeros_like(bits, dtype=bool)
    comps: list[np.ndarray] = []
    for r0 in range(h):
        for c0 in range(w):
            if not bits[r0, c0] or seen[r0, c0]:
                continue
            comp = np.zeros_like(bits)
            queue = deque([(r0, c0)])
            seen[r0, c0] = True
            while queue:
                r, c = queue.popleft()
                comp[r, c] = 1
                for dr, dc in _NEIGHBORS_8:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and bits[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        queue.append((rr, cc))
            comps.append(comp)
    return comps


def max_connected_component(mask: BinaryMask) -> Optional[BinaryMask]:
    """Largest 8-connected component; None when the mask is empty.

    Size ties break toward the component with the lexicographically
    smallest (row_min, col_min).
    """
    comps = connected_components(mask)
    if not comps:
        return None

    def sort_key(comp: np.ndarray):
        rows, cols = np.nonzero(comp)
        return (-int(comp.sum()), int(rows.min()), int(cols.min()))

    return BinaryMask(min(comps, key=sort_key))


def bbox_of_mask(mask: BinaryMask) -> BoundingBox:
    """Tightest box covering every 1-cell."""
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise EmptyRegionError("bbox_of_mask: mask has no 1-cells")
    return BoundingBox(int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max()))


def scale_box(box: BoundingBox, from_hw: tuple[int, int], to_hw: tuple[int, int]) -> BoundingBox:
    """Map a box between grids: each source cell covers a block of target
    pixels, and the scaled box covers every pixel its cells touch."""
    fh, fw = from_hw
    th, tw = to_hw
    if fh < 1 or fw < 1:
        raise ValidationError(f"invalid source grid {from_hw}")
    ry, rx = th / fh, tw / fw
    row_min = int(np.floor(box.row_min * ry))
    row_max = min(th - 1, int(np.ceil((box.row_max + 1) * ry)) - 1)
    col_min = int(np.floor(box.col_min * rx))
    col_max = min(tw - 1, int(np.ceil((box.col_max + 1) * rx)) - 1)
    return BoundingBox(row_min, row_max, col_min, col_max)


def bilinear_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D array with half-pixel-center sampling (align_corners=false)."""
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"output size must be positive, got {out_h}x{out_w}")
    src = np.asarray(values, dtype=np.float64)
    h, w = src.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - wx) + src[np.ix_(y0, x1)] * wx
    bot = src[np.ix_(y1, x0)] * (1 - wx) + src[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def crop_resize(
    img: GrayImage,
    box: BoundingBox,
    out_h: int,
    out_w: int,
    box_hw: Optional[tuple[int, int]] = None,
) -> GrayImage:
    """Crop a box and bilinear-resize it to out_h x out_w.

    `box_hw` gives the grid the box coordinates live in (the activation
    resolution); the box is first scaled up to the image resolution. By
    default the box is taken at image resolution.
    """
    if box_hw is not None and (box_hw[0] != img.height or box_hw[1] != img.width):
        box = scale_box(box, box_hw, (img.height, img.width))
    if box.row_min < 0 or box.col_min < 0 or box.row_max >= img.height or box.col_max >= img.width:
        raise ValidationError(
            f"box rows [{box.row_min},{box.row_max}] cols [{box.col_min},{box.col_max}] "
            f"out of bounds for {img.height}x{img.width} image"
        )
    crop = img.pixels[box.row_min : box.row_max + 1, box.col_min : box.col_max + 1]
    if crop.shape == (out_h, out_w):
        return GrayImage(crop.copy())
    return GrayImage(bilinear_resize(crop, out_h, out_w))


def upsample_mask_nearest(mask: BinaryMask, out_h: int, out_w: int) -> BinaryMask:
    """Nearest-neighbor resample of a mask to a new grid."""
    h, w = mask.bits.shape
    if (h, w) == (out_h, out_w):
        return mask
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return BinaryMask(mask.bits[np.ix_(ys, xs)])


def split_infected_lr(
    mask: BinaryMask, img: GrayImage, out: int
) -> tuple[GrayImage, GrayImage, SplitFlags]:
    """Split the lesion mask at the vertical midline into left/right crops.

    Each half with 1-cells yields the tight-box crop of the image within
    that half; a half with no cells falls back to the full half-image crop
    and raises its flag (the healthy-case contract).
    """
    if img.width < 2:
        raise ValidationError(f"image too narrow to split: width {img.width}")
    m = upsample_mask_nearest(mask, img.height, img.width)
    mid = img.width // 2
    halves = (
        BoundingBox(0, img.height - 1, 0, mid - 1),
        BoundingBox(0, img.height - 1, mid, img.width - 1),
    )
    crops: list[GrayImage] = []
    flags: list[bool] = []
    for half in halves:
        sub = m.bits[:, half.col_min : half.col_max + 1]
        rows, cols = np.nonzero(sub)
        if rows.size == 0:
            crops.append(crop_resize(img, half, out, out))
            flags.append(True)
        else:
            tight = BoundingBox(
                int(rows.min()),
                int(rows.max()),
                half.col_min + int(cols.min()),
                half.col_min + int(cols.max()),
            )
            crops.append(crop_resize(img, tight, out, out))
            flags.append(False)
    return crops[0], crops[1], SplitFlags(flags[0], flags[1])
