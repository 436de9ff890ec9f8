"""Four-branch classification network: a global stream over the whole image,
a heat-map stream over the most-activated region, an infected stream over
left/right lesion crops, and a fusion head over all pooled features.

Branch probabilities route as: the global head sees only the image, the
heat-map head sees the image via the global activations, the infected head
sees the image and the segmentation mask. The fusion head concatenates the
three pooled vectors in a fixed order that is part of the checkpoint
contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .nn import (
    Parameter,
    Tensor,
    concat,
    conv2d,
    fully_connected,
    global_avg_pool,
    maxpool2d,
    relu,
    sigmoid_normalize,
)
from .vision import (
    BinaryMask,
    BoundingBox,
    GrayImage,
    HeatMap,
    bbox_of_mask,
    binarize,
    crop_resize,
    heatmap_normalize,
    max_connected_component,
    split_infected_lr,
)

DEFAULT_TAU = 0.75
BRANCH_NAMES = ("global", "heatmap", "infected")


@dataclass(frozen=True)
class BackboneConfig:
    """Conv/relu/maxpool stack shape. `final_channels` is the width of the
    last conv stage, which is what the pooled feature and CAM see."""

    stage_channels: tuple = (8, 16, 32)
    blocks_per_stage: int = 1
    final_channels: int = 32
    input_size: int = 224

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_channels) < 1 or any(c < 1 for c in self.stage_channels):
            raise ValidationError(f"bad stage_channels {self.stage_channels}")
        if self.final_channels < 1:
            raise ValidationError(f"final_channels must be >= 1, got {self.final_channels}")
        if self.blocks_per_stage < 1:
            raise ValidationError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        down = 2 ** len(self.stage_channels)
        if self.input_size < down or self.input_size % down != 0:
            raise ValidationError(
                f"input_size {self.input_size} not divisible by 2^{len(self.stage_channels)}"
            )

    @property
    def activation_size(self) -> int:
        return self.input_size // 2 ** len(self.stage_channels)


def _he_conv(rng, out_c, in_c, k):
    fan_in = in_c * k * k
    return (rng.standard_normal((out_c, in_c, k, k)) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _he_fc(rng, out_d, in_d):
    return (rng.standard_normal((out_d, in_d)) * np.sqrt(2.0 / in_d)).astype(np.float32)


class Backbone:
    """Stages of [3x3 conv + relu] x blocks followed by 2x2 max-pool, then a
    final 3x3 conv + relu to `final_channels`."""

    def __init__(self, cfg: BackboneConfig, rng, prefix: str):
        self.cfg = cfg
        self.params: list[Parameter] = []
        self._convs: list[tuple[Parameter, Parameter]] = []
        in_c = 1
        for si, out_c in enumerate(cfg.stage_channels):
            for bi in range(cfg.blocks_per_stage):
                name = f"{prefix}.s{si}b{bi}"
                w = Parameter(_he_conv(rng, out_c, in_c, 3), name=f"{name}.w")
                b = Parameter(np.zeros(out_c, dtype=np.float32), name=f"{name}.b", is_bias=True)
                self.params += [w, b]
                self._convs.append((w, b))
                in_c = out_c
        w = Parameter(_he_conv(rng, cfg.final_channels, in_c, 3), name=f"{prefix}.final.w")
        b = Parameter(
            np.zeros(cfg.final_channels, dtype=np.float32), name=f"{prefix}.final.b", is_bias=True
        )
        self.params += [w, b]
        self._final = (w, b)

    def forward(self, x: Tensor) -> Tensor:
        """[1,H,W] image tensor -> [K,h,w] nonnegative activations."""
        i = 0
        for _ in self.cfg.stage_channels:
            for _ in range(self.cfg.blocks_per_stage):
                w, b = self._convs[i]
                x = relu(conv2d(x, w.value, b.value, pad=1))
                i += 1
            x = maxpool2d(x, 2, 2)
        w, b = self._final
        return relu(conv2d(x, w.value, b.value, pad=1))


class Branch:
    """One stream: a backbone plus an FC head mapping pooled features to C logits."""

    def __init__(self, name: str, cfg: BackboneConfig, head_in: int, num_classes: int, rng):
        if name not in BRANCH_NAMES:
            raise ValidationError(f"unknown branch name {name!r}")
        self.name = name
        self.backbone = Backbone(cfg, rng, prefix=name)
        self.head_w = Parameter(_he_fc(rng, num_classes, head_in), name=f"{name}.head.w")
        self.head_b = Parameter(
            np.zeros(num_classes, dtype=np.float32), name=f"{name}.head.b", is_bias=True
        )

    @property
    def params(self) -> list[Parameter]:
        return self.backbone.params + [self.head_w, self.head_b]

    def head(self, pooled: Tensor) -> Tensor:
        return fully_connected(pooled, self.head_w.value, self.head_b.value)


def _to_tensor(img: GrayImage) -> Tensor:
    return Tensor(img.pixels[None, :, :])


class MultiStreamModel:
    """The full four-stream model. The infected backbone is shared by the
    left and right crops; its pooled feature is [pool_L, pool_R, pool_g],
    and the fusion input is [pool_g, pool_h, pool_in] (pool_g appears in
    both, deliberately)."""

    def __init__(
        self,
        backbone: BackboneConfig = None,
        num_classes: int = 2,
        tau: float = DEFAULT_TAU,
        seed: int = 0,
    ):
        if backbone is None:
            backbone = BackboneConfig()
        if num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {num_classes}")
        if not 0.0 <= tau <= 1.0:
            raise ValidationError(f"tau must be in [0,1], got {tau}")
        self.config = backbone
        self.num_classes = num_classes
        self.tau = float(tau)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        d = backbone.final_channels
        self.global_branch = Branch("global", backbone, d, num_classes, rng)
        self.heatmap_branch = Branch("heatmap", backbone, d, num_classes, rng)
        self.infected_branch = Branch("infected", backbone, 3 * d, num_classes, rng)
        self.fusion_dim = d + d + 3 * d  # pool_g + pool_h + pool_in (itself 2d + pool_g)
        self.fusion_w = Parameter(_he_fc(rng, num_classes, self.fusion_dim), name="fusion.head.w")
        self.fusion_b = Parameter(
            np.zeros(num_classes, dtype=np.float32), name="fusion.head.b", is_bias=True
        )

    # -- parameter bookkeeping -------------------------------------------

    def branch(self, name: str) -> Branch:
        return {
            "global": self.global_branch,
            "heatmap": self.heatmap_branch,
            "infected": self.infected_branch,
        }[name]

    def parameters(self) -> list[Parameter]:
        out = []
        for name in BRANCH_NAMES:
            out += self.branch(name).params
        return out + [self.fusion_w, self.fusion_b]

    def fusion_params(self) -> list[Parameter]:
        return [self.fusion_w, self.fusion_b]

    def set_frozen(self, branch_names, frozen: bool):
        for name in branch_names:
            if name == "fusion":
                params = self.fusion_params()
            else:
                params = self.branch(name).params
            for p in params:
                p.frozen = frozen

    def frozen_state(self) -> dict:
        state = {}
        for name in BRANCH_NAMES:
            state[name] = all(p.frozen for p in self.branch(name).params)
        state["fusion"] = all(p.frozen for p in self.fusion_params())
        return state

    # -- forward passes ---------------------------------------------------

    def _check_size(self, img: GrayImage):
        s = self.config.input_size
        if img.pixels.shape != (s, s):
            raise DimensionError(f"expected {s}x{s} input, got {img.pixels.shape}")

    def forward_global(self, img: GrayImage):
        """-> (activations [K,h,w], pool_g [K], logits_g [C])"""
        self._check_size(img)
        acts = self.global_branch.backbone.forward(_to_tensor(img))
        pool_g = global_avg_pool(acts)
        return acts, pool_g, self.global_branch.head(pool_g)

    def heatmap_crop(self, img: GrayImage, activations) -> tuple[GrayImage, bool]:
        """Most-activated region of the image, or the full image when the
        thresholded map is empty (healthy-case fallback). Returns (crop, fell_back)."""
        data = activations.data if isinstance(activations, Tensor) else np.asarray(activations)
        h = heatmap_normalize(data)
        comp = max_connected_component(binarize(h, self.tau))
        s = self.config.input_size
        if comp is None:
            return crop_resize(img, BoundingBox(0, s - 1, 0, s - 1), s, s), True
        box = bbox_of_mask(comp)
        return crop_resize(img, box, s, s, box_hw=(h.height, h.width)), False

    def forward_heatmap(self, img: GrayImage, activations):
        """-> (pool_h [K], logits_h [C]); uses detached global activations."""
        crop, _ = self.heatmap_crop(img, activations)
        acts = self.heatmap_branch.backbone.forward(_to_tensor(crop))
        pool_h = global_avg_pool(acts)
        return pool_h, self.heatmap_branch.head(pool_h)

    def forward_infected(self, img: GrayImage, seg_mask: BinaryMask, pool_g: Tensor):
        """-> (pool_in [3K], logits_in [C]); the mask drives the left/right crops."""
        s = self.config.input_size
        left, right, _ = split_infected_lr(seg_mask, img, s)
        pool_l = global_avg_pool(self.infected_branch.backbone.forward(_to_tensor(left)))
        pool_r = global_avg_pool(self.infected_branch.backbone.forward(_to_tensor(right)))
        pool_in = concat([pool_l, pool_r, pool_g])
        return pool_in, self.infected_branch.head(pool_in)

    def forward_fusion(self, pool_g: Tensor, pool_h: Tensor, pool_in: Tensor) -> Tensor:
        """-> logits_f [C]; concatenation order (g, h, in) is fixed."""
        pool_f = concat([pool_g, pool_h, pool_in])
        if pool_f.size != self.fusion_dim:
            raise DimensionError(
                f"fusion head expects {self.fusion_dim} features, got {pool_f.size}"
            )
        return fully_connected(pool_f, self.fusion_w.value, self.fusion_b.value)

    def forward_all(self, img: GrayImage, seg_mask: BinaryMask) -> dict:
        """One full pass; returns every intermediate keyed by name."""
        acts, pool_g, logits_g = self.forward_global(img)
        pool_h, logits_h = self.forward_heatmap(img, acts)
        pool_in, logits_in = self.forward_infected(img, seg_mask, pool_g)
        logits_f = self.forward_fusion(pool_g, pool_h, pool_in)
        return {
            "activations": acts,
            "pool_g": pool_g,
            "pool_h": pool_h,
            "pool_in": pool_in,
            "logits": {
                "global": logits_g,
                "heatmap": logits_h,
                "infected": logits_in,
                "fusion": logits_f,
            },
        }

    # -- prediction and interpretation -------------------------------------

    def predict_proba(self, logits: Tensor) -> np.ndarray:
        return sigmoid_normalize(logits).data.copy()

    def predict(self, logits: Tensor) -> int:
        """Class decision: argmax of the per-class scores, or a 0.5 threshold
        when there is a single output."""
        p = self.predict_proba(logits)
        if self.num_classes == 1:
            return int(p[0] > 0.5)
        return int(np.argmax(p))


def cam(activations, head_weights, class_idx: int) -> HeatMap:
    """Class activation map: the head-weighted channel sum, min-max normalized
    to [0,1]. An all-equal raw map renders as all zeros."""
    acts = activations.data if isinstance(activations, Tensor) else np.asarray(activations)
    w = head_weights.data if isinstance(head_weights, Tensor) else np.asarray(head_weights)
    if acts.ndim != 3:
        raise ValidationError(f"activations must be [K,h,w], got shape {acts.shape}")
    if w.ndim != 2:
        raise ValidationError(f"head_weights must be [C,K], got shape {w.shape}")
    if not 0 <= class_idx < w.shape[0]:
        raise ValidationError(f"class_idx {class_idx} out of range for {w.shape[0]} classes")
    if w.shape[1] != acts.shape[0]:
        raise DimensionError(
            f"head width {w.shape[1]} does not match {acts.shape[0]} channels"
        )
    raw = np.tensordot(w[class_idx].astype(np.float64), acts.astype(np.float64), axes=(0, 0))
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return HeatMap(np.zeros_like(raw, dtype=np.float32))
    return HeatMap(((raw - lo) / (hi - lo)).astype(np.float32))


def one_hot(label: int, num_classes: int) -> np.ndarray:
    """Targets for the per-class sigmoid heads; class 1 is the positive class."""
    if not 0 <= label < max(num_classes, 2):
        raise ValidationError(f"label {label} out of range")
    if num_classes == 1:
        return np.array([float(label)], dtype=np.float32)
    out = np.zeros(num_classes, dtype=np.float32)
    out[label] = 1.0
    return out
