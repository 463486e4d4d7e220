"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` wraps an ndarray and records the operation that produced it.
Calling :meth:`Tensor.backward` on a scalar output walks the recorded graph
in reverse topological order and accumulates gradients into every node that
requires them.  Only the operations needed by the matcher forward pass and
its losses are implemented; all of them are deterministic.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteValueError(ArithmeticError):
    """Raised when a recorded computation produces NaN or infinity."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Node in the computation graph: a value plus how to backpropagate it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- graph construction helpers -------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _make(self, data, parents, op, backward) -> "Tensor":
        out = Tensor(data, parents=parents, op=op)
        if out.requires_grad:
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return self._make(a.data + b.data, (a, b), "add", backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(-g)

        return self._make(-a.data, (a,), "neg", backward)

    def __sub__(self, other) -> "Tensor":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return self._make(a.data * b.data, (a, b), "mul", backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return self._make(a.data / b.data, (a, b), "div", backward)

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self
        c = float(exponent)

        def backward(g):
            a._accumulate(g * c * np.power(a.data, c - 1.0))

        return self._make(np.power(a.data, c), (a,), "pow", backward)

    def __matmul__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return self._make(a.data @ b.data, (a, b), "matmul", backward)

    @property
    def T(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(g.T)

        return self._make(a.data.T, (a,), "transpose", backward)

    # -- elementwise nonlinearities ---------------------------------------

    def exp(self) -> "Tensor":
        a = self
        value = np.exp(a.data)

        def backward(g):
            a._accumulate(g * value)

        return self._make(value, (a,), "exp", backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return self._make(np.log(a.data), (a,), "log", backward)

    def tanh(self) -> "Tensor":
        a = self
        value = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - value * value))

        return self._make(value, (a,), "tanh", backward)

    def relu(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(g * (a.data > 0.0))

        return self._make(np.maximum(a.data, 0.0), (a,), "relu", backward)

    def clip(self, lo: float | None, hi: float | None) -> "Tensor":
        """Clamp with subgradient 1 strictly inside (lo, hi) and 0 outside."""
        a = self
        lo_v = -np.inf if lo is None else float(lo)
        hi_v = np.inf if hi is None else float(hi)

        def backward(g):
            a._accumulate(g * ((a.data > lo_v) & (a.data < hi_v)))

        return self._make(np.clip(a.data, lo_v, hi_v), (a,), "clip", backward)

    # -- reductions and shape ops ----------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self
        value = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())

        return self._make(value, (a,), "sum", backward)

    def take_rows(self, idx: np.ndarray) -> "Tensor":
        """Row gather; backward scatter-adds into the source rows."""
        a = self
        idx = np.asarray(idx, dtype=np.intp)

        def backward(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accumulate(acc)

        return self._make(a.data[idx], (a,), "take_rows", backward)

    def gather(self, rows: np.ndarray, cols: np.ndarray) -> "Tensor":
        """Elementwise gather ``a[rows[k], cols[k]]`` from a 2-D tensor."""
        a = self
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)

        def backward(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, (rows, cols), g)
            a._accumulate(acc)

        return self._make(a.data[rows, cols], (a,), "gather", backward)

    def reshape(self, *shape: int) -> "Tensor":
        a = self
        old = a.data.shape

        def backward(g):
            a._accumulate(g.reshape(old))

        return self._make(a.data.reshape(*shape), (a,), "reshape", backward)

    # -- backward pass -----------------------------------------------------

    def _toposort(self) -> list["Tensor"]:
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = self._toposort()
        if not np.isfinite(self.data):
            for node in order:
                if not np.all(np.isfinite(node.data)):
                    raise NonFiniteValueError(
                        f"first non-finite value produced by op '{node.op}'"
                    )
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# -- composite helpers ----------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate 2-D tensors; backward splits the gradient."""
    parts = list(tensors)
    value = np.concatenate([t.data for t in parts], axis=axis)
    out = Tensor(value, parents=tuple(parts), op="concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in parts]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(sl)])

        out._backward = backward
    return out


def softmax(t: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis`` (shift is a constant)."""
    shift = Tensor(t.data.max(axis=axis, keepdims=True))
    e = (t - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)
