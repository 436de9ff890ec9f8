"""Reverse-mode autodiff over numpy arrays.

Tensors form a define-by-run graph: every op in `tristream.nn.ops` records
its inputs and a backward closure on the output tensor. `Tensor.backward`
walks the graph in reverse topological order and accumulates gradients
into the leaves.

Float32 is the working dtype; float64 inputs are kept as-is so the
gradient checker can run the same graph at higher precision. Accumulation
is sequential and row-major, so runs are bit-reproducible for a fixed seed
on one machine.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import NumericalError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph building inside the block (inference / cached features)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    `data` is always a C-contiguous float32 or float64 ndarray. `grad`
    stays None until a backward pass writes into it and always matches
    `data`'s shape and dtype afterwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in {what}")
        return self

    def _accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from this tensor to every reachable leaf.

        `grad` seeds the output gradient; a scalar tensor defaults to 1.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError(
                    "backward() without an explicit gradient needs a scalar output, "
                    f"got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        g = np.asarray(grad, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = g.reshape(self.data.shape)

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate_grad(g)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap an op result, attaching the graph edge only when grads are on."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
