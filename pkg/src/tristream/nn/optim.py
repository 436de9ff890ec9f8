"""SGD with momentum and L2 weight decay, plus the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import DimensionError, NumericalError, ValidationError
from .tensor import Tensor


@dataclass
class OptimizerConfig:
    """Settings for SGD: lr 0.01 divided by ten every 30 epochs, momentum 0.9,
    weight decay 1e-4. `decay_bias` controls whether biases get weight decay
    (applied uniformly by default)."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_epoch: int = 30
    lr_decay_factor: float = 0.1
    decay_bias: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValidationError(f"lr_decay_factor must be in (0,1], got {self.lr_decay_factor}")
        if self.lr_decay_epoch < 1:
            raise ValidationError(f"lr_decay_epoch must be >= 1, got {self.lr_decay_epoch}")

    def lr_at_epoch(self, epoch: int) -> float:
        """Learning rate for a 1-indexed epoch: decays by the factor every
        `lr_decay_epoch` epochs (epoch 31 with defaults -> 0.001)."""
        if epoch < 1:
            raise ValidationError(f"epoch is 1-indexed, got {epoch}")
        return self.learning_rate * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_epoch)


class Parameter:
    """A trainable value with its momentum buffer and freeze flag.

    A frozen parameter is left bitwise untouched by `sgd_step`, momentum
    buffer included.
    """

    __slots__ = ("value", "momentum_buffer", "frozen", "name", "is_bias")

    def __init__(self, value, name: str = "", frozen: bool = False, is_bias: bool = False):
        self.value = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
        self.value.requires_grad = True
        self.momentum_buffer = np.zeros_like(self.value.data)
        self.frozen = frozen
        self.name = name
        self.is_bias = is_bias

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def sgd_step(
    params: Sequence[Parameter],
    grads: Optional[Sequence[Optional[np.ndarray]]] = None,
    cfg: OptimizerConfig = OptimizerConfig(),
    lr: Optional[float] = None,
) -> None:
    """One SGD update: g' = g + wd*w; v <- m*v + g'; w <- w - lr*v.

    `grads` defaults to each parameter's accumulated `.grad`. Frozen
    parameters and parameters without a gradient are skipped entirely.
    """
    if grads is None:
        grads = [p.value.grad for p in params]
    if len(grads) != len(params):
        raise ValidationError(f"got {len(grads)} grads for {len(params)} params")
    step_lr = cfg.learning_rate if lr is None else lr
    for p, g in zip(params, grads):
        if p.frozen or g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.value.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter '{p.name}' shape {p.value.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{p.name}'")
        w = p.value.data
        if cfg.weight_decay and (cfg.decay_bias or not p.is_bias):
            g = g + cfg.weight_decay * w
        v = p.momentum_buffer
        v *= cfg.momentum
        v += g.astype(v.dtype, copy=False)
        w -= step_lr * v
