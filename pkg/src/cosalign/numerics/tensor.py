"""Dense tensor with reverse-mode differentiation.

A Tensor produced by an op keeps its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` visits the graph in reverse
topological order; every node that requires grad ends up with ``.grad`` set.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE: type = np.float32

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def default_dtype() -> type:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors.

    Oracle tests run under ``precision(np.float64)``; training runs in float32.
    """
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = self.name
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += g

    def __add__(self, other) -> "Tensor":
        from .ops import add

        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        from .ops import add, scale

        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -np.asarray(other))

    def __mul__(self, other) -> "Tensor":
        from .ops import scale

        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from .ops import scale

        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        from .ops import sum_all

        return sum_all(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order
