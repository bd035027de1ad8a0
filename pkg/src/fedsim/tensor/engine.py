"""Tape-free reverse-mode differentiation over dense float64 arrays.

Each ``Tensor`` records the tensors it was computed from and a closure that
pushes its gradient back to them. ``Tensor.backward`` walks the graph in
reverse topological order. The engine is deliberately small: it supports
exactly the operations the fedsim models and losses need.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from fedsim.errors import StructuralError


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64, copy=True, ndmin=0)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that remembers how it was computed.

    ``shape`` and ``values`` mirror the plain data; ``grad`` is filled in by
    :meth:`backward` for every tensor created with ``requires_grad=True`` or
    derived from one.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor to every ancestor.

        Without ``seed`` the tensor must hold a single element, which is the
        usual case of a scalar loss.
        """
        if seed is None:
            if self.data.size != 1:
                raise StructuralError(f"backward() without seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.asarray(seed, dtype=np.float64).reshape(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other) -> "Tensor":
        return add(as_tensor(other), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def _backward(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = _backward if out.requires_grad else None
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(-g)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = _backward if out.requires_grad else None
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise StructuralError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = _backward if out.requires_grad else None
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), _parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g * mask)
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), _parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g * out.data)
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, _parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(2.0 * g * a.data)
    return out


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis), _parents=(a,))

    def _backward(g: np.ndarray) -> None:
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    out._backward = _backward if out.requires_grad else None
    return out


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def index(a: Tensor, key) -> Tensor:
    out = Tensor(np.array(a.data[key], dtype=np.float64), _parents=(a,))

    def _backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accumulate(full)

    out._backward = _backward if out.requires_grad else None
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape), _parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts))
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _backward(g: np.ndarray) -> None:
        for part, piece in zip(parts, np.split(g, bounds, axis=axis)):
            part._accumulate(piece)

    out._backward = _backward if out.requires_grad else None
    return out


def sparse_matmul(matrix: sp.spmatrix, a: Tensor) -> Tensor:
    """Left-multiply by a constant sparse matrix (adjacency, pooling)."""
    if matrix.shape[1] != a.shape[0]:
        raise StructuralError(f"sparse_matmul shape mismatch: {matrix.shape} @ {a.shape}")
    out = Tensor(np.asarray(matrix @ a.data), _parents=(a,))
    if out.requires_grad:
        transposed = matrix.T.tocsr()
        out._backward = lambda g: a._accumulate(np.asarray(transposed @ g))
    return out


def segment_max(a: Tensor, starts: np.ndarray) -> Tensor:
    """Columnwise max over contiguous row segments beginning at ``starts``.

    Ties route the gradient to the first maximal row of each segment.
    """
    rows = a.shape[0]
    starts = np.asarray(starts, dtype=np.intp)
    if starts.size == 0 or starts[0] != 0 or np.any(np.diff(starts) <= 0) or starts[-1] >= rows:
        raise StructuralError(f"segment_max needs nonempty increasing segments over {rows} rows")
    values = np.maximum.reduceat(a.data, starts, axis=0)
    ends = np.append(starts[1:], rows)
    argmax = np.empty(values.shape, dtype=np.intp)
    for s, (lo, hi) in enumerate(zip(starts, ends)):
        argmax[s] = lo + np.argmax(a.data[lo:hi], axis=0)
    out = Tensor(values, _parents=(a,))

    def _backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        cols = np.broadcast_to(np.arange(a.shape[1]), argmax.shape)
        np.add.at(full, (argmax, cols), g)
        a._accumulate(full)

    out._backward = _backward if out.requires_grad else None
    return out


def log_softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    z = logits.data / temperature
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(shifted - lse, _parents=(logits,))

    def _backward(g: np.ndarray) -> None:
        soft = np.exp(out.data)
        logits._accumulate((g - soft * g.sum(axis=-1, keepdims=True)) / temperature)

    out._backward = _backward if out.requires_grad else None
    return out
