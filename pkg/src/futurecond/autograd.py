"""Array-valued reverse-mode differentiation.

A ``Tensor`` wraps a float64 numpy array and records the operation that
produced it. Calling ``backward()`` on a scalar tensor walks the recorded
graph in reverse topological order and accumulates ``grad`` on every tensor
that requires it.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self._parents = tuple(p for p in _parents if p.requires_grad)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph construction ----------------------------------------------
    def _make(self, data, parents, backward, op) -> "Tensor":
        out = Tensor(data, _parents=parents, _op=op)
        if out.requires_grad:
            out._backward = backward
        return out

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
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
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return [_unbroadcast(g, p.shape) for p in (a, b) if p.requires_grad]

        return self._make(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self._make(-self.data, (self,), lambda g: [-g], "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            out = []
            if a.requires_grad:
                out.append(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                out.append(_unbroadcast(g * a.data, b.shape))
            return out

        return self._make(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            out = []
            if a.requires_grad:
                out.append(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                out.append(_unbroadcast(-g * a.data / b.data**2, b.shape))
            return out

        return self._make(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, power: float) -> "Tensor":
        x = self.data
        return self._make(
            x**power, (self,), lambda g: [g * power * x ** (power - 1)], "pow"
        )

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul operands must be at least 2-d")

        def backward(g):
            out = []
            if a.requires_grad:
                out.append(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                out.append(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
            return out

        return self._make(a.data @ b.data, (a, b), backward, "matmul")

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return [full]

        return self._make(self.data[index], (self,), backward, "getitem")

    # -- elementwise ------------------------------------------------------
    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return self._make(y, (self,), lambda g: [g * y], "exp")

    def log(self) -> "Tensor":
        x = self.data
        return self._make(np.log(x), (self,), lambda g: [g / x], "log")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return self._make(self.data * mask, (self,), lambda g: [g * mask], "relu")

    def clip(self, lo: float | None = None, hi: float | None = None) -> "Tensor":
        """Clamp values; the gradient is zero wherever the clamp is active."""
        y = np.clip(self.data, lo, hi)
        mask = y == self.data
        return self._make(y, (self,), lambda g: [g * mask], "clip")

    def maximum(self, floor: float) -> "Tensor":
        mask = self.data >= floor
        y = np.where(mask, self.data, floor)
        return self._make(y, (self,), lambda g: [g * mask], "maximum")

    def square(self) -> "Tensor":
        x = self.data
        return self._make(x * x, (self,), lambda g: [2.0 * g * x], "square")

    # -- reductions and shape --------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return [np.broadcast_to(g, shape).copy()]

        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return self._make(
            self.data.reshape(*shape), (self,), lambda g: [g.reshape(old)], "reshape"
        )

    def expand_dims(self, axis: int) -> "Tensor":
        old = self.shape
        return self._make(
            np.expand_dims(self.data, axis), (self,), lambda g: [g.reshape(old)], "expand"
        )

    def broadcast_to(self, shape) -> "Tensor":
        old = self.shape
        return self._make(
            np.broadcast_to(self.data, shape).copy(),
            (self,),
            lambda g: [_unbroadcast(g, old)],
            "broadcast",
        )

    def logsumexp(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        x = self.data
        m = np.max(x, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
        y_keep = np.log(s) + m

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return [g * np.exp(x - y_keep)]

        y = y_keep if keepdims else np.squeeze(y_keep, axis=axis)
        return self._make(y, (self,), backward, "logsumexp")

    def log_softmax(self, axis: int = -1) -> "Tensor":
        x = self.data
        m = np.max(x, axis=axis, keepdims=True)
        y = x - m - np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))

        def backward(g):
            return [g - np.exp(y) * g.sum(axis=axis, keepdims=True)]

        return self._make(y, (self,), backward, "log_softmax")

    def softmax(self, axis: int = -1) -> "Tensor":
        x = self.data
        e = np.exp(x - np.max(x, axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return [y * (g - (g * y).sum(axis=axis, keepdims=True))]

        return self._make(y, (self,), backward, "softmax")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return [p for t, p in zip(tensors, parts) if t.requires_grad]

    out = Tensor(data, _parents=tensors, _op="concat")
    if out.requires_grad:
        out._backward = backward
    return out


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            out.append(_unbroadcast(np.where(mask, 0.0, g), b.shape))
        return out

    out = Tensor(np.where(mask, a.data, b.data), _parents=(a, b), _op="where")
    if out.requires_grad:
        out._backward = backward
    return out


def stopgrad(x: Tensor) -> Tensor:
    return as_tensor(x).detach()


def numerical_gradient(
    fn: Callable[[], float], param: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central finite differences of ``fn`` with respect to ``param`` (mutated in place)."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + h
        up = fn()
        param[idx] = orig - h
        down = fn()
        param[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad
