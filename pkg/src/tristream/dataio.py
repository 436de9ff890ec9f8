"""Dataset plumbing: the CSV manifest, the key=value run configuration, the
synthetic dataset generator, and manifest-to-sample loading.

Manifest columns: image_path,label,mask_path,split,role
  split: train | val | test
  role:  seed-masked (mask on disk, seeds the segmenter)
         unlabeled   (no mask yet; pseudo-labeling candidate)
         labeled-only (class label only)
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataIOError, ValidationError
from .imgio import read_image, read_mask, write_image, write_mask
from .model import BackboneConfig
from .nn import OptimizerConfig
from .trainer import Sample
from .vision import BinaryMask, GrayImage, bilinear_resize, upsample_mask_nearest

MANIFEST_HEADER = "image_path,label,mask_path,split,role"
SPLITS = ("train", "val", "test")
ROLES = ("seed-masked", "unlabeled", "labeled-only")


@dataclass(frozen=True)
class ManifestRow:
    image_path: str           # as written in the file (possibly relative)
    label: int
    mask_path: Optional[str]  # as written; None when blank
    split: str
    role: str
    resolved_image: str = ""
    resolved_mask: Optional[str] = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label}")
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.role not in ROLES:
            raise ValidationError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.role == "seed-masked" and not self.mask_path:
            raise ValidationError("seed-masked rows must carry a mask_path")

    @property
    def sample_id(self) -> str:
        return os.path.splitext(os.path.basename(self.image_path))[0]


def load_manifest(path: str) -> list:
    """Parse and validate; relative paths resolve against the manifest's
    directory and must exist."""
    if not os.path.exists(path):
        raise DataIOError(f"{path}: no such manifest")
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValidationError(
            f"{path}:1: header must be exactly {MANIFEST_HEADER!r}, got {lines[0] if lines else ''!r}"
        )
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValidationError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        image_path, label_s, mask_path, split, role = (p.strip() for p in parts)
        try:
            label = int(label_s)
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: label {label_s!r} is not an integer")
        try:
            row = ManifestRow(
                image_path=image_path,
                label=label,
                mask_path=mask_path or None,
                split=split,
                role=role,
                resolved_image=os.path.normpath(os.path.join(base, image_path)),
                resolved_mask=os.path.normpath(os.path.join(base, mask_path)) if mask_path else None,
            )
        except ValidationError as e:
            raise ValidationError(f"{path}:{lineno}: {e}") from e
        if not os.path.exists(row.resolved_image):
            raise ValidationError(f"{path}:{lineno}: image {row.image_path!r} does not exist")
        if row.resolved_mask and not os.path.exists(row.resolved_mask):
            raise ValidationError(f"{path}:{lineno}: mask {row.mask_path!r} does not exist")
        rows.append(row)
    return rows


def manifest_text(rows) -> str:
    """Canonical manifest bytes: header plus one comma-joined line per row."""
    out = [MANIFEST_HEADER]
    for r in rows:
        out.append(f"{r.image_path},{r.label},{r.mask_path or ''},{r.split},{r.role}")
    return "\n".join(out) + "\n"


def write_manifest(path: str, rows) -> None:
    try:
        with open(path, "w", encoding="ascii", newline="\n") as f:
            f.write(manifest_text(rows))
    except OSError as e:
        raise DataIOError(f"{path}: {e}") from e


# -- run configuration -----------------------------------------------------

@dataclass
class RunConfig:
    """Everything a training run needs; the empty config reproduces the
    reference hyperparameters (lr 0.01 with /10 steps every 30 epochs,
    momentum 0.9, weight decay 1e-4, batch 32, 50 epochs, input 224,
    threshold 0.75)."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    num_classes: int = 2
    tau: float = 0.75
    epochs: int = 50
    batch_size: int = 32
    patience: int = 10
    val_fraction: float = 0.2
    seed: int = 0
    segmenter_channels: int = 8
    segmenter_k: int = 100
    segmenter_epochs: int = 5

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must be in [0,1], got {self.tau}")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValidationError("epochs, batch_size, patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError(f"val_fraction must be in (0,1), got {self.val_fraction}")


def load_config(path: Optional[str] = None) -> RunConfig:
    """key=value sections; missing file or missing keys fall back to defaults."""
    cp = configparser.ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise DataIOError(f"{path}: no such config file")
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ValidationError(f"{path}: {e}") from e

    def get(section, key, cast, default):
        try:
            raw = cp.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError):
            return default
        try:
            return cast(raw)
        except ValueError as e:
            raise ValidationError(f"{path}: [{section}] {key}={raw!r}: {e}") from e

    def channels(raw: str):
        return tuple(int(c) for c in raw.split(",") if c.strip())

    backbone = BackboneConfig(
        stage_channels=get("model", "stage_channels", channels, (8, 16, 32)),
        blocks_per_stage=get("model", "blocks_per_stage", int, 1),
        final_channels=get("model", "final_channels", int, 32),
        input_size=get("model", "input_size", int, 224),
    )
    optimizer = OptimizerConfig(
        learning_rate=get("optimizer", "learning_rate", float, 0.01),
        momentum=get("optimizer", "momentum", float, 0.9),
        weight_decay=get("optimizer", "weight_decay", float, 1e-4),
        lr_decay_epoch=get("optimizer", "lr_decay_epoch", int, 30),
        lr_decay_factor=get("optimizer", "lr_decay_factor", float, 0.1),
        decay_bias=get("optimizer", "decay_bias", lambda s: s.lower() in ("1", "true", "yes"), True),
    )
    return RunConfig(
        backbone=backbone,
        optimizer=optimizer,
        num_classes=get("model", "num_classes", int, 2),
        tau=get("model", "tau", float, 0.75),
        epochs=get("training", "epochs", int, 50),
        batch_size=get("training", "batch_size", int, 32),
        patience=get("training", "patience", int, 10),
        val_fraction=get("training", "val_fraction", float, 0.2),
        seed=get("training", "seed", int, 0),
        segmenter_channels=get("segmenter", "base_channels", int, 8),
        segmenter_k=get("segmenter", "k", int, 100),
        segmenter_epochs=get("segmenter", "epochs", int, 5),
    )


# -- synthetic data ----------------------------------------------------------

def _ellipse_mask(size, cy, cx, ay, ax) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _erode(region: np.ndarray, rounds: int) -> np.ndarray:
    """3x3 binary erosion, `rounds` times (no wraparound)."""
    out = region.copy()
    for _ in range(rounds):
        padded = np.pad(out, 1, mode="constant", constant_values=False)
        acc = np.ones_like(out)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                acc &= padded[1 + dy : 1 + dy + out.shape[0], 1 + dx : 1 + dx + out.shape[1]]
        out = acc
    return out


def _synth_one(rng, size: int, positive: bool):
    """One image: dark elliptical field on gray noise; positives get 1-3
    blobs strictly inside the field, brighter than everything around them.

    A third of the positives are subtle (one small, faint blob): trivially
    visible in a close-up crop, easy to wash out under whole-image pooling.
    """
    img = rng.uniform(0.46, 0.54, (size, size)).astype(np.float32)
    cy = size / 2 + rng.uniform(-size / 16, size / 16)
    cx = size / 2 + rng.uniform(-size / 16, size / 16)
    ay = size * rng.uniform(0.28, 0.36)
    ax = size * rng.uniform(0.30, 0.40)
    field = _ellipse_mask(size, cy, cx, ay, ax)
    img[field] = rng.uniform(0.16, 0.26, int(field.sum())).astype(np.float32)
    mask = np.zeros((size, size), dtype=np.uint8)
    if positive:
        interior = _erode(field, 2)  # blobs keep a 2px dark margin
        subtle = rng.random() < 0.35
        n_blobs = 1 if subtle else int(rng.integers(1, 4))
        radius = (0.040, 0.062) if subtle else (0.07, 0.12)
        bright = (0.58, 0.68) if subtle else (0.80, 0.95)
        placed = 0
        attempts = 0
        while placed < n_blobs and attempts < 200:
            attempts += 1
            by = size * rng.uniform(*radius)
            bx = size * rng.uniform(*radius)
            bcy = cy + rng.uniform(-0.7, 0.7) * ay
            bcx = cx + rng.uniform(-0.7, 0.7) * ax
            blob = _ellipse_mask(size, bcy, bcx, by, bx)
            if not blob.any() or (blob & ~interior).any():
                continue
            img[blob] = rng.uniform(*bright, int(blob.sum())).astype(np.float32)
            mask |= blob.astype(np.uint8)
            placed += 1
        if placed == 0:
            raise ValidationError("could not place any blob inside the field")
        if (mask.astype(bool) & ~field).any():
            raise ValidationError("blob escaped the elliptical field")
    return GrayImage(img), BinaryMask(mask)


def generate_synthetic(n: int, size: int, seed: int, out_dir: str) -> str:
    """Write a balanced synthetic dataset (images, positive masks, manifest)
    and return the manifest path. Same arguments -> byte-identical tree."""
    if n < 2 or n % 2 != 0:
        raise ValidationError(f"n must be even and >= 2, got {n}")
    if size < 32:
        raise ValidationError(f"size must be >= 32, got {size}")
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    half = n // 2

    def split_of(i, m):
        n_val = max(1, int(round(0.2 * m))) if m >= 5 else 0
        n_test = max(1, int(round(0.2 * m))) if m >= 5 else 0
        if i < m - n_val - n_test:
            return "train"
        if i < m - n_test:
            return "val"
        return "test"

    rows = []
    train_pos_ids = []
    for idx in range(n):
        positive = idx < half
        img, mask = _synth_one(rng, size, positive)
        name = f"img_{idx:04d}"
        write_image(os.path.join(img_dir, f"{name}.pgm"), img)
        rel_mask = ""
        if positive:
            write_mask(os.path.join(mask_dir, f"{name}.pgm"), mask)
        split = split_of(idx if positive else idx - half, half)
        if positive and split == "train":
            train_pos_ids.append(len(rows))
        rows.append([f"images/{name}.pgm", 1 if positive else 0, rel_mask, split, "unlabeled"])

    # a quarter of the training positives ship with their mask (the seed set)
    n_seed = max(1, int(round(0.25 * len(train_pos_ids))))
    for row_idx in train_pos_ids[:n_seed]:
        name = os.path.splitext(os.path.basename(rows[row_idx][0]))[0]
        rows[row_idx][2] = f"masks/{name}.pgm"
        rows[row_idx][4] = "seed-masked"
    # rows outside the train split carry only their class label
    for row in rows:
        if row[3] != "train":
            row[4] = "labeled-only"

    manifest_rows = [
        ManifestRow(
            image_path=r[0], label=r[1], mask_path=r[2] or None, split=r[3], role=r[4],
            resolved_image=os.path.join(out_dir, r[0]),
            resolved_mask=os.path.join(out_dir, r[2]) if r[2] else None,
        )
        for r in rows
    ]
    manifest_path = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest_path, manifest_rows)
    return manifest_path


# -- manifest -> samples -----------------------------------------------------

def _resize_image(img: GrayImage, size: int) -> GrayImage:
    if img.pixels.shape == (size, size):
        return img
    return GrayImage(bilinear_resize(img.pixels, size, size))


def load_samples(rows, input_size: int, mask_overrides: Optional[dict] = None) -> list:
    """Manifest rows -> training samples at the model's input size.

    `mask_overrides` maps sample_id to a mask file path (the pseudo-label
    sidecar); a row's own mask_path wins over an override.
    """
    samples = []
    for row in rows:
        img = _resize_image(read_image(row.resolved_image), input_size)
        mask = None
        mask_path = row.resolved_mask
        if mask_path is None and mask_overrides:
            mask_path = mask_overrides.get(row.sample_id)
        if mask_path is not None:
            m = read_mask(mask_path)
            if m.bits.shape != (input_size, input_size):
                m = upsample_mask_nearest(m, input_size, input_size)
            mask = m
        samples.append(Sample(row.sample_id, img, row.label, mask))
    return samples


def split_rows(rows) -> dict:
    out = {s: [] for s in SPLITS}
    for r in rows:
        out[r.split].append(r)
    return out
