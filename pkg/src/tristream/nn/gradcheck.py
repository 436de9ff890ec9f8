"""Central finite-difference verification of reverse-mode gradients.

The op under test is re-run in float64 (both the graph and the finite
differences) so the check measures backward-rule correctness rather than
float32 rounding noise. Every output element contributes through a fixed
random cotangent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ValidationError
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    per_input: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max relative error {self.max_rel_error:.3e} (tol {self.tol:.1e})"


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), 1.0)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence,
    step: float = 1e-3,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of `op(*inputs)` against central
    finite differences, elementwise over every input.

    The comparison scalar is sum(op(x) * R) for a fixed random cotangent R,
    so the whole Jacobian is exercised. Relative error is measured against
    the larger gradient magnitude with a floor of 1.
    """
    if step <= 0:
        raise ValidationError(f"grad_check step must be > 0, got {step}")
    rng = rng or np.random.default_rng(0)

    xs = [Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                 requires_grad=True) for x in inputs]
    y = op(*xs)
    cotangent = rng.standard_normal(y.shape) if y.size > 1 else np.ones(y.shape)
    y.backward(cotangent)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]

    def scalar_at(values: list[np.ndarray]) -> float:
        ts = [Tensor(v) for v in values]
        return float((op(*ts).data * cotangent).sum())

    per_input: list[float] = []
    base = [x.data for x in xs]
    for i, x in enumerate(xs):
        fd = np.zeros_like(x.data)
        flat = fd.reshape(-1)
        for j in range(x.size):
            bumped = [b.copy() if k == i else b for k, b in enumerate(base)]
            bumped[i].reshape(-1)[j] = base[i].reshape(-1)[j] + step
            up = scalar_at(bumped)
            bumped[i].reshape(-1)[j] = base[i].reshape(-1)[j] - step
            down = scalar_at(bumped)
            flat[j] = (up - down) / (2.0 * step)
        per_input.append(_rel_error(analytic[i], fd))

    worst = max(per_input) if per_input else 0.0
    return GradCheckReport(max_rel_error=worst, tol=tol, passed=worst < tol, per_input=per_input)
