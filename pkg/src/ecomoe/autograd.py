"""Minimal array-level reverse-mode automatic differentiation.

Values are numpy ``float64`` arrays wrapped in :class:`Tensor`. Operations
executed while a :class:`GradTape` is active are recorded in execution order;
``tape.gradient(loss, params)`` sweeps the record backwards and returns one
gradient array per requested parameter. Outside a tape the same functions are
a thin eager layer over numpy, so inference and training share one forward
path.

Parameters flagged ``frozen`` never accumulate an adjoint: their gradient is
returned as an array of exact zeros.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE: list["GradTape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "frozen", "name", "__weakref__")

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 frozen: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.frozen = frozen
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*ts: Tensor) -> bool:
    return any(t.requires_grad and not t.frozen for t in ts)


class GradTape:
    """Records differentiable operations for one reverse sweep.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.gradient(loss, [w])[0]
    array([4.])
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        if loss.data.size != 1:
            raise ValueError("gradient() needs a scalar loss")
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, backward in reversed(self.nodes):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            pgrads = backward(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad or p.frozen:
                    continue
                key = id(p)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
        out = []
        for p in params:
            if p.frozen:
                out.append(np.zeros_like(p.data))
                continue
            g = adj.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64))
        return out


def grad(loss: Tensor, tape: GradTape, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` recorded on ``tape``."""
    return tape.gradient(loss, params)


def _record(out_data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and _tracked(*parents):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append((out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data @ b.data, (a, b), backward)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _record(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                              _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


# ------------------------------------------------------------------ unary ops

def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    return _record(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def clip(x, lo=None, hi=None) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _record(out, (x,), lambda g: (np.where(inside, g, 0.0),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(x.data[idx], (x,), backward)


# ----------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def logsumexp(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = (np.log(tot) + m).squeeze(axis)
    soft = s / tot
    return _record(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,))


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _record(out, (x,),
                   lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def norm(x, axis=-1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is zero."""
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=axis))

    def backward(g):
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * x.data,)

    return _record(out, (x,), backward)


def stack(xs: Iterable, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _record(out, tuple(xs), backward)


def concatenate(xs: Iterable, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)

    def backward(g):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    return _record(out, tuple(xs), backward)
