"""Self-training loop for the infected-region segmenter.

A small encoder-decoder grows its mask-labeled training set in batches:
train on what is labeled, predict masks for a random batch of unlabeled
images, adopt those predictions as pseudo labels, repeat until nothing is
unlabeled, then train once more on everything. Per-round semantics are
train -> sample -> label -> merge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError
from .nn import (
    OptimizerConfig,
    Parameter,
    Tensor,
    bce_loss,
    concat_channels,
    conv2d,
    maxpool2d,
    no_grad,
    relu,
    sgd_step,
    sigmoid_normalize,
    upsample2x,
)
from .vision import BinaryMask, GrayImage

DEFAULT_BATCH_K = 100

SEED_PROVENANCE = "seed"
PSEUDO_PROVENANCE = "pseudo"


@dataclass
class LabeledImage:
    """An image with a mask and a record of where the mask came from.

    Provenance is assigned once; replacing a seed mask with a pseudo mask
    is a contract violation, not an update.
    """

    image_id: str
    image: GrayImage
    mask: BinaryMask
    provenance: str

    def __post_init__(self):
        if self.provenance not in (SEED_PROVENANCE, PSEUDO_PROVENANCE):
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        if self.mask.bits.shape != self.image.pixels.shape:
            raise ValidationError(
                f"{self.image_id}: mask {self.mask.bits.shape} does not match "
                f"image {self.image.pixels.shape}"
            )


@dataclass
class PseudoLabelPool:
    """Labeled train set and unlabeled test set; disjoint, jointly covering."""

    train_set: list = field(default_factory=list)
    test_set: list = field(default_factory=list)  # (image_id, GrayImage) pairs
    batch_size: int = DEFAULT_BATCH_K

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        self._check_partition()

    def _check_partition(self):
        train_ids = [item.image_id for item in self.train_set]
        test_ids = [iid for iid, _ in self.test_set]
        seen = set(train_ids)
        if len(seen) != len(train_ids):
            raise ValidationError("duplicate ids in train_set")
        overlap = seen.intersection(test_ids)
        if overlap:
            raise ValidationError(f"ids in both sets: {sorted(overlap)[:5]}")
        if len(set(test_ids)) != len(test_ids):
            raise ValidationError("duplicate ids in test_set")

    def all_ids(self) -> set:
        return {item.image_id for item in self.train_set} | {iid for iid, _ in self.test_set}

    def expected_rounds(self) -> int:
        return -(-len(self.test_set) // self.batch_size)


def _seg_conv(rng, out_c, in_c):
    fan_in = in_c * 9
    return (rng.standard_normal((out_c, in_c, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Segmenter:
    """Three-level encoder-decoder with skip connections and a sigmoid head.

    Output is a per-pixel probability map the size of the input; callers
    binarize at 0.5 for storage.
    """

    def __init__(self, input_size: int, base_channels: int = 8, seed: int = 0):
        if input_size < 8 or input_size % 4 != 0:
            raise ValidationError(f"input_size must be a multiple of 4 and >= 8, got {input_size}")
        self.input_size = int(input_size)
        self.base_channels = int(base_channels)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        c = base_channels
        spec = [
            ("enc0", c, 1), ("enc1", 2 * c, c), ("enc2", 4 * c, 2 * c),
            ("dec1", 2 * c, 4 * c + 2 * c), ("dec0", c, 2 * c + c), ("out", 1, c),
        ]
        self.params: list[Parameter] = []
        self._w = {}
        for name, out_c, in_c in spec:
            w = Parameter(_seg_conv(rng, out_c, in_c), name=f"seg.{name}.w")
            b = Parameter(np.zeros(out_c, dtype=np.float32), name=f"seg.{name}.b", is_bias=True)
            self.params += [w, b]
            self._w[name] = (w, b)

    def _conv(self, name, x, activation=True):
        w, b = self._w[name]
        out = conv2d(x, w.value, b.value, pad=1)
        return relu(out) if activation else out

    def forward(self, img: GrayImage) -> Tensor:
        """[H,W] image -> [H,W] probability map in (0,1)."""
        if img.pixels.shape != (self.input_size, self.input_size):
            raise ValidationError(
                f"expected {self.input_size}x{self.input_size}, got {img.pixels.shape}"
            )
        x = Tensor(img.pixels[None, :, :])
        e0 = self._conv("enc0", x)                      # [c, H, W]
        e1 = self._conv("enc1", maxpool2d(e0, 2, 2))    # [2c, H/2, W/2]
        e2 = self._conv("enc2", maxpool2d(e1, 2, 2))    # [4c, H/4, W/4]
        d1 = self._conv("dec1", concat_channels([upsample2x(e2), e1]))
        d0 = self._conv("dec0", concat_channels([upsample2x(d1), e0]))
        logits = self._conv("out", d0, activation=False)
        return sigmoid_normalize(logits)

    def predict_mask(self, img: GrayImage) -> BinaryMask:
        with no_grad():
            prob = self.forward(img)
        return BinaryMask((prob.data[0] > 0.5).astype(np.uint8))

    def snapshot(self) -> list:
        return [p.value.data.copy() for p in self.params]

    def restore(self, snap) -> None:
        for p, data in zip(self.params, snap):
            p.value.data[:] = data
            p.momentum_buffer[:] = 0.0


def train_segmenter(
    seg: Segmenter,
    train_set: list,
    epochs: int,
    cfg: Optional[OptimizerConfig] = None,
    seed: int = 0,
    batch_size: int = 8,
) -> list:
    """Minimize mean per-pixel BCE over the labeled set. Returns per-epoch
    mean losses. Zero epochs leaves parameters untouched."""
    if not train_set:
        raise ValidationError("train_segmenter: empty train set")
    if epochs < 0:
        raise ValidationError(f"epochs must be >= 0, got {epochs}")
    if cfg is None:
        cfg = OptimizerConfig(learning_rate=0.05, momentum=0.9, weight_decay=1e-4)
    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_set))
        lr = cfg.lr_at_epoch(epoch)
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            for p in seg.params:
                p.value.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                item = train_set[int(idx)]
                prob = seg.forward(item.image)
                target = Tensor(item.mask.bits.astype(np.float32)[None, :, :])
                loss = bce_loss(prob, target)
                loss.backward(np.full(loss.shape, 1.0 / len(batch), dtype=np.float32))
                batch_loss += loss.item()
            sgd_step(seg.params, cfg=cfg, lr=lr)
            epoch_loss += batch_loss
        losses.append(epoch_loss / len(order))
    return losses


def pseudo_label_round(seg: Segmenter, pool: PseudoLabelPool, rng) -> int:
    """Move min(k, |test|) randomly chosen images into the train set with
    predicted masks. Returns how many were adopted."""
    if not pool.test_set:
        return 0
    take = min(pool.batch_size, len(pool.test_set))
    chosen = rng.choice(len(pool.test_set), size=take, replace=False)
    chosen_set = set(int(i) for i in chosen)
    adopted, remaining = [], []
    for i, (iid, img) in enumerate(pool.test_set):
        if i in chosen_set:
            adopted.append(LabeledImage(iid, img, seg.predict_mask(img), PSEUDO_PROVENANCE))
        else:
            remaining.append((iid, img))
    pool.train_set.extend(adopted)
    pool.test_set[:] = remaining
    pool._check_partition()
    return len(adopted)


@dataclass(frozen=True)
class Algorithm1Report:
    rounds: int
    round_sizes: tuple
    final_train_size: int
    losses_per_round: tuple


def run_algorithm1(
    seg: Segmenter,
    pool: PseudoLabelPool,
    epochs_per_round: int,
    seed: int = 0,
    cfg: Optional[OptimizerConfig] = None,
) -> Algorithm1Report:
    """Alternate training and pseudo-labeling until the unlabeled set is
    empty, then train once more on the full set. Mutates seg and pool."""
    if not pool.train_set:
        raise ValidationError("run_algorithm1: need a mask-labeled seed set")
    all_ids = pool.all_ids()
    rng = np.random.default_rng(seed)
    round_sizes, losses = [], []
    round_no = 0
    while pool.test_set:
        losses.append(
            tuple(train_segmenter(seg, pool.train_set, epochs_per_round, cfg=cfg, seed=seed + round_no))
        )
        round_sizes.append(pseudo_label_round(seg, pool, rng))
        round_no += 1
        if pool.all_ids() != all_ids:
            raise ValidationError("pool lost or gained images during a round")
    losses.append(
        tuple(train_segmenter(seg, pool.train_set, epochs_per_round, cfg=cfg, seed=seed + round_no))
    )
    return Algorithm1Report(
        rounds=round_no,
        round_sizes=tuple(round_sizes),
        final_train_size=len(pool.train_set),
        losses_per_round=tuple(losses),
    )
