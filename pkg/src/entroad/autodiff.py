"""Minimal reverse-mode differentiation over numpy arrays.

The training objective is a fixed, smallish computation graph, so a tape
with a dozen primitives is enough. Every op also accepts plain ndarrays
and then behaves like the corresponding numpy call, which lets the loss
and similarity code be written once and shared between the differentiable
training path and the plain inference path.

The finite-difference helpers at the bottom are the independent oracle
used to validate every adjoint in the test suite.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the parent's shape."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the tape: a value plus how to push gradients to parents."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, _parents=(), _vjp=None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp  # callable(out_grad) -> per-parent gradients

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def backward(self) -> None:
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        for node in order:
            node.grad = np.zeros_like(node.value)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._vjp(node.grad)):
                if parent.requires_grad and pgrad is not None:
                    parent.grad = parent.grad + pgrad if parent.grad is not None else pgrad

    # -- operator sugar -------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


# -- primitives ---------------------------------------------------------


def add(a, b):
    if not _any_tensor(a, b):
        return np.add(a, b)
    a, b = _lift(a), _lift(b)
    sa, sb = a.value.shape, b.value.shape
    return Tensor(
        a.value + b.value,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b):
    if not _any_tensor(a, b):
        return np.subtract(a, b)
    a, b = _lift(a), _lift(b)
    sa, sb = a.value.shape, b.value.shape
    return Tensor(
        a.value - b.value,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b):
    if not _any_tensor(a, b):
        return np.multiply(a, b)
    a, b = _lift(a), _lift(b)
    sa, sb = a.value.shape, b.value.shape
    av, bv = a.value, b.value
    return Tensor(
        av * bv,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)),
    )


def div(a, b):
    if not _any_tensor(a, b):
        return np.divide(a, b)
    a, b = _lift(a), _lift(b)
    sa, sb = a.value.shape, b.value.shape
    av, bv = a.value, b.value
    return Tensor(
        av / bv,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * av / (bv * bv), sb)),
    )


def matmul(a, b):
    if not _any_tensor(a, b):
        return np.matmul(a, b)
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    out = av @ bv

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        raise ValueError(f"unsupported matmul ranks {av.ndim} @ {bv.ndim}")

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def power(a, exponent: float):
    if not _any_tensor(a):
        return np.power(a, exponent)
    a = _lift(a)
    av = a.value
    if exponent == 0:
        return Tensor(np.ones_like(av), _parents=(a,), _vjp=lambda g: (np.zeros_like(av),))
    return Tensor(
        np.power(av, exponent),
        _parents=(a,),
        _vjp=lambda g: (g * exponent * np.power(av, exponent - 1.0),),
    )


def exp(a):
    if not _any_tensor(a):
        return np.exp(a)
    a = _lift(a)
    out = np.exp(a.value)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * out,))


def log(a):
    if not _any_tensor(a):
        return np.log(a)
    a = _lift(a)
    av = a.value
    return Tensor(np.log(av), _parents=(a,), _vjp=lambda g: (g / av,))


def sqrt(a):
    if not _any_tensor(a):
        return np.sqrt(a)
    a = _lift(a)
    out = np.sqrt(a.value)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g / (2.0 * out),))


def relu(a):
    if not _any_tensor(a):
        return np.maximum(a, 0.0)
    a = _lift(a)
    mask = a.value > 0
    return Tensor(np.where(mask, a.value, 0.0), _parents=(a,), _vjp=lambda g: (g * mask,))


def sigmoid(a):
    if not _any_tensor(a):
        out = np.empty_like(np.asarray(a, dtype=float))
        pos = np.asarray(a) >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-np.asarray(a)[pos]))
        ez = np.exp(np.asarray(a)[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    a = _lift(a)
    out = sigmoid(a.value)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * out * (1.0 - out),))


def sum_(a, axis=None, keepdims=False):
    if not _any_tensor(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    a = _lift(a)
    shape = a.value.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.value.dtype, copy=False),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def mean_(a, axis=None, keepdims=False):
    count = value_of(a).size if axis is None else value_of(a).shape[axis]
    return div(sum_(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape):
    if not _any_tensor(a):
        return np.reshape(a, shape)
    a = _lift(a)
    old = a.value.shape
    return Tensor(a.value.reshape(shape), _parents=(a,), _vjp=lambda g: (g.reshape(old),))


def concat(parts: Sequence, axis=0):
    if not _any_tensor(*parts):
        return np.concatenate(parts, axis=axis)
    parts = [_lift(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)

    def vjp(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return Tensor(out, _parents=tuple(parts), _vjp=vjp)


# -- composites ---------------------------------------------------------


def softmax(a, axis=-1):
    """Numerically stable softmax; the max shift is treated as a constant,
    which is exact because softmax is shift-invariant."""
    shift = value_of(a).max(axis=axis, keepdims=True)
    e = exp(sub(a, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))


def l2_normalize(a, axis=-1, eps=1e-12):
    norm = sqrt(add(sum_(mul(a, a), axis=axis, keepdims=True), eps))
    return div(a, norm)


# -- finite-difference oracle -------------------------------------------


def finite_difference(
    f: Callable[[dict[str, np.ndarray]], float],
    arrays: dict[str, np.ndarray],
    h: float = 1e-5,
    coords: Optional[dict[str, Iterable[tuple]]] = None,
) -> dict[str, dict[tuple, float]]:
    """Central finite differences of a scalar function of named arrays.

    Evaluates f twice per coordinate; `coords` restricts which entries are
    probed (all entries by default).
    """
    out: dict[str, dict[tuple, float]] = {}
    for name, base in arrays.items():
        base = np.asarray(base, dtype=np.float64)
        idx_list = list(coords[name]) if coords is not None else [
            tuple(i) for i in np.ndindex(base.shape)
        ]
        grads = {}
        for idx in idx_list:
            bumped = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
            bumped[name][idx] = base[idx] + h
            up = f(bumped)
            bumped[name][idx] = base[idx] - h
            down = f(bumped)
            grads[idx] = (up - down) / (2.0 * h)
        out[name] = grads
    return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
