"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A Var wraps a value and remembers how it was produced; ``backward`` walks the
tape in reverse topological order and accumulates exact gradients into every
parameter leaf. Nondifferentiable points follow the engine-wide subgradient
conventions: |x| and relu use 0 at the kink, max routes ties to the lowest
index (numpy argmax order).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node in the computation tape."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: tuple["Var", ...] = (),
        backward: Callable[[Array], None] | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def _accumulate(self, grad: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += grad

    # --- arithmetic -----------------------------------------------------

    def __add__(self, other) -> "Var":
        other = as_var(other)
        out = Var(self.value + other.value, parents=(self, other))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.value.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.value.shape))

        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Var":
        out = Var(-self.value, parents=(self,))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(-g)

        out._backward = backward
        return out

    def __sub__(self, other) -> "Var":
        return self + (-as_var(other))

    def __rsub__(self, other) -> "Var":
        return as_var(other) + (-self)

    def __mul__(self, other) -> "Var":
        other = as_var(other)
        out = Var(self.value * other.value, parents=(self, other))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.value, self.value.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.value, other.value.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Var":
        return self * as_var(other) ** -1.0

    def __rtruediv__(self, other) -> "Var":
        return as_var(other) * self**-1.0

    def __pow__(self, exponent: float) -> "Var":
        p = float(exponent)
        out = Var(self.value**p, parents=(self,))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(g * p * self.value ** (p - 1.0))

        out._backward = backward
        return out

    def __matmul__(self, other) -> "Var":
        other = as_var(other)
        if self.value.ndim != 2 or other.value.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        out = Var(self.value @ other.value, parents=(self, other))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(g @ other.value.T)
            if other.requires_grad:
                other._accumulate(self.value.T @ g)

        out._backward = backward
        return out

    # --- shaping --------------------------------------------------------

    def reshape(self, *shape) -> "Var":
        out = Var(self.value.reshape(*shape), parents=(self,))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(g.reshape(self.value.shape))

        out._backward = backward
        return out

    @property
    def T(self) -> "Var":
        out = Var(self.value.T, parents=(self,))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(g.T)

        out._backward = backward
        return out

    def __getitem__(self, key) -> "Var":
        out = Var(self.value[key], parents=(self,))

        def backward(g: Array) -> None:
            if self.requires_grad:
                full = np.zeros_like(self.value)
                np.add.at(full, key, g)
                self._accumulate(full)

        out._backward = backward
        return out

    def take_rows(self, indices: Array) -> "Var":
        """Gather along axis 0; duplicate indices accumulate on backward."""
        idx = np.asarray(indices)
        out = Var(self.value[idx], parents=(self,))

        def backward(g: Array) -> None:
            if self.requires_grad:
                full = np.zeros_like(self.value)
                np.add.at(full, idx, g)
                self._accumulate(full)

        out._backward = backward
        return out

    # --- reductions and nonlinearities -----------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Var":
        out = Var(self.value.sum(axis=axis, keepdims=keepdims), parents=(self,))

        def backward(g: Array) -> None:
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.value.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.value.shape).copy())

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Var":
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False) -> "Var":
        """Maximum along one axis; ties route their gradient to the lowest index."""
        out_val = self.value.max(axis=axis, keepdims=keepdims)
        argmax = np.argmax(self.value, axis=axis)
        out = Var(out_val, parents=(self,))

        def backward(g: Array) -> None:
            if not self.requires_grad:
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(self.value)
            np.put_along_axis(full, np.expand_dims(argmax, axis), g, axis)
            self._accumulate(full)

        out._backward = backward
        return out

    def exp(self) -> "Var":
        out_val = np.exp(self.value)
        out = Var(out_val, parents=(self,))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(g * out_val)

        out._backward = backward
        return out

    def log(self) -> "Var":
        out = Var(np.log(self.value), parents=(self,))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(g / self.value)

        out._backward = backward
        return out

    def relu(self) -> "Var":
        out = Var(np.maximum(self.value, 0.0), parents=(self,))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(g * (self.value > 0.0))

        out._backward = backward
        return out

    def abs(self) -> "Var":
        out = Var(np.abs(self.value), parents=(self,))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(g * np.sign(self.value))

        out._backward = backward
        return out

    def sigmoid(self) -> "Var":
        v = self.value
        out_val = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
        out = Var(out_val, parents=(self,))

        def backward(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(g * out_val * (1.0 - out_val))

        out._backward = backward
        return out


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def param(value) -> Var:
    """A leaf that collects gradients."""
    return Var(value, requires_grad=True)


def constant(value) -> Var:
    return Var(value)


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=axis), parents=tuple(parts))
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    out._backward = backward
    return out


def row_normalize(x: Var, axis: int = -1) -> Var:
    """Scale each row (last axis by default) to unit Euclidean norm."""
    norms = (x * x).sum(axis=axis, keepdims=True) ** 0.5
    return x * norms**-1.0


def logsumexp(x: Var, axis=None, keepdims: bool = False) -> Var:
    """Overflow-safe log-sum-exp; the max shift is a constant on the tape."""
    shift = np.max(x.value, axis=axis, keepdims=True)
    shifted = (x - constant(shift)).exp().sum(axis=axis, keepdims=keepdims).log()
    if keepdims or axis is None:
        return shifted + constant(shift if keepdims else shift.item())
    return shifted + constant(np.squeeze(shift, axis=axis))


def backward(root: Var) -> None:
    """Accumulate d(root)/d(leaf) into every reachable parameter's .grad."""
    if root.value.size != 1:
        raise ValueError("backward expects a scalar root")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
