"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive accepts plain arrays as well as :class:`Tensor` objects.  When
no input is a tensor the primitive is just the numpy computation, so model
code written against these functions runs unchanged with or without a tape.

Usage::

    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    y = ad.sum(ad.exp(x) * x)
    (gx,) = backward(tape, y, [x])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from ..errors import DimensionError
from ..matcore import matexp as _matexp_value


class Tape:
    """Append-only record of the operations producing each tensor."""

    def __init__(self):
        self.values: list = []
        self.parents: list[tuple] = []

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, value, parents) -> "Tensor":
        self.values.append(value)
        self.parents.append(parents)
        return Tensor(value, self, len(self.values) - 1)

    def leaf(self, value) -> "Tensor":
        return self._push(np.asarray(value, dtype=np.float64), ())


class Tensor:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def mT(self):
        return mT(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, index={self.index})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value(x):
    """The numeric value of a tensor or array."""
    return x.value if isinstance(x, Tensor) else x


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _record(out, *pairs: tuple[object, Callable]):
    """Record ``out`` with ``(input, vjp)`` pairs; constants are dropped."""
    tape = None
    parents = []
    for x, vjp in pairs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("cannot mix tensors from different tapes")
            parents.append((x.index, vjp))
    if tape is None:
        return out
    return tape._push(out, tuple(parents))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _record(va + vb, (a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb)))


def sub(a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _record(va - vb, (a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(-g, sb)))


def mul(a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _record(va * vb, (a, lambda g: _unbroadcast(g * vb, sa)), (b, lambda g: _unbroadcast(g * va, sb)))


def div(a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    out = va / vb
    return _record(out, (a, lambda g: _unbroadcast(g / vb, sa)),
                   (b, lambda g: _unbroadcast(-g * out / vb, sb)))


def neg(a):
    return _record(-value(a), (a, lambda g: -g))


def power(a, p: float):
    va = value(a)
    return _record(va ** p, (a, lambda g: g * p * va ** (p - 1)))


def square(a):
    va = value(a)
    return _record(va * va, (a, lambda g: 2.0 * g * va))


def exp(a):
    out = np.exp(value(a))
    return _record(out, (a, lambda g: g * out))


def log(a):
    va = value(a)
    return _record(np.log(va), (a, lambda g: g / va))


def sqrt(a):
    out = np.sqrt(value(a))
    return _record(out, (a, lambda g: 0.5 * g / out))


def tanh(a):
    out = np.tanh(value(a))
    return _record(out, (a, lambda g: g * (1.0 - out * out)))


def relu(a):
    va = value(a)
    return _record(np.maximum(va, 0.0), (a, lambda g: g * (va > 0)))


def softplus(a):
    va = value(a)
    out = np.logaddexp(0.0, va)
    return _record(out, (a, lambda g: g * _sigmoid(va)))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a):
    out = _sigmoid(value(a))
    return _record(out, (a, lambda g: g * out * (1.0 - out)))


# --- shape manipulation -----------------------------------------------------

def mT(a):
    """Swap the last two axes."""
    return _record(np.swapaxes(value(a), -1, -2), (a, lambda g: np.swapaxes(g, -1, -2)))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _record(np.transpose(value(a), axes), (a, lambda g: np.transpose(g, inv)))


def reshape(a, shape):
    sa = np.shape(value(a))
    return _record(np.reshape(value(a), shape), (a, lambda g: np.reshape(g, sa)))


def broadcast_to(a, shape):
    sa = np.shape(value(a))
    return _record(np.broadcast_to(value(a), shape), (a, lambda g: _unbroadcast(g, sa)))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


class IndexedGrad:
    """Sparse gradient contribution ``zeros(shape)[idx] = g``."""

    __slots__ = ("idx", "g", "shape", "basic")

    def __init__(self, idx, g, shape, basic):
        self.idx, self.g, self.shape, self.basic = idx, g, shape, basic

    def dense(self):
        out = np.zeros(self.shape)
        self.add_into(out)
        return out

    def add_into(self, buf):
        if self.basic:
            buf[self.idx] += self.g
        else:
            np.add.at(buf, self.idx, self.g)


def getitem(a, idx):
    va = value(a)
    basic = _is_basic_index(idx)
    shape = np.shape(va)
    return _record(va[idx], (a, lambda g: IndexedGrad(idx, g, shape, basic)))


def stack(xs: Sequence, axis: int = 0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    pairs = [(x, (lambda i: lambda g: np.take(g, i, axis=ax))(i)) for i, x in enumerate(xs)]
    return _record(out, *pairs)


def concatenate(xs: Sequence, axis: int = 0):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    bounds = np.cumsum([0] + [np.shape(v)[ax] for v in vals])
    pairs = []
    for i, x in enumerate(xs):
        sl = [slice(None)] * out.ndim
        sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
        pairs.append((x, (lambda s: lambda g: g[s])(tuple(sl))))
    return _record(out, *pairs)


def diagonal(a):
    """Diagonal of the last two axes."""
    va = value(a)
    n = va.shape[-1]

    def vjp(g):
        out = np.zeros(va.shape)
        idx = np.arange(n)
        out[..., idx, idx] = g
        return out

    return _record(np.diagonal(va, axis1=-2, axis2=-1).copy(), (a, vjp))


# --- reductions -------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    va = value(a)
    sa = np.shape(va)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, sa)

    return _record(np.sum(va, axis=axis, keepdims=keepdims), (a, vjp))


def mean(a, axis=None, keepdims=False):
    va = value(a)
    n = np.size(va) if axis is None else np.prod([np.shape(va)[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) / float(n)


# --- linear algebra ---------------------------------------------------------

def matmul(a, b):
    va, vb = value(a), value(b)
    if np.ndim(va) < 2 or np.ndim(vb) < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    sa, sb = np.shape(va), np.shape(vb)
    return _record(
        va @ vb,
        (a, lambda g: _unbroadcast(g @ np.swapaxes(vb, -1, -2), sa)),
        (b, lambda g: _unbroadcast(np.swapaxes(va, -1, -2) @ g, sb)),
    )


def solve(a, b):
    """``a^{-1} b`` for square ``a`` (batched); ``b`` has shape (..., n, k)."""
    va, vb = value(a), value(b)
    x = np.linalg.solve(va, vb)
    sa, sb = np.shape(va), np.shape(vb)
    cache = {}

    def gb_of(g):
        if "gb" not in cache:
            cache["gb"] = np.linalg.solve(np.swapaxes(va, -1, -2), g)
        return cache["gb"]

    return _record(
        x,
        (a, lambda g: _unbroadcast(-gb_of(g) @ np.swapaxes(x, -1, -2), sa)),
        (b, lambda g: _unbroadcast(gb_of(g), sb)),
    )


def matexp(a):
    """Matrix exponential; gradient via the block-triangular Frechet identity."""
    va = value(a)
    out = _matexp_value(va)

    def vjp(g):
        n = va.shape[-1]
        g = np.broadcast_to(g, out.shape)
        mt = np.swapaxes(va, -1, -2)
        block = np.zeros(out.shape[:-2] + (2 * n, 2 * n))
        block[..., :n, :n] = mt
        block[..., n:, n:] = mt
        block[..., :n, n:] = g
        return _matexp_value(block)[..., :n, n:]

    return _record(out, (a, vjp))


def cholesky(a):
    """Lower Cholesky factor (batched).  Gradient is the symmetric one."""
    va = value(a)
    Lw = np.linalg.cholesky(va)

    def vjp(g):
        n = Lw.shape[-1]
        P = np.swapaxes(Lw, -1, -2) @ g
        P = np.tril(P)
        idx = np.arange(n)
        P[..., idx, idx] *= 0.5
        Linv = np.linalg.inv(Lw)
        S = np.swapaxes(Linv, -1, -2) @ P @ Linv
        return 0.5 * (S + np.swapaxes(S, -1, -2))

    return _record(Lw, (a, vjp))


def lyapunov(F, C):
    """Solve ``F P + P F^T + C = 0`` for a single square ``F``."""
    vF, vC = value(F), value(C)
    P = scipy.linalg.solve_continuous_lyapunov(vF, -vC)
    cache = {}

    def adjoint(g):
        if "S" not in cache:
            cache["S"] = scipy.linalg.solve_continuous_lyapunov(vF.T, -np.asarray(g))
        return cache["S"]

    return _record(
        P,
        (F, lambda g: adjoint(g) @ P.T + adjoint(g).T @ P),
        (C, lambda g: adjoint(g)),
    )


def eye_like(n: int):
    return np.eye(n)


# --- backward pass ----------------------------------------------------------

def backward(tape: Tape, output: Tensor, wrt: Sequence[Tensor] | Tensor):
    """Gradients of the scalar ``output`` with respect to ``wrt``.

    Returns a list of arrays aligned with ``wrt`` (or a single array if a
    single tensor was passed).
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if not isinstance(output, Tensor):
        grads = [np.zeros(np.shape(t.value)) for t in targets]
        return grads[0] if single else grads
    if np.size(output.value) != 1:
        raise DimensionError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.index: np.ones(np.shape(output.value))}
    lowest = min(t.index for t in targets) if targets else 0
    keep = {t.index for t in targets}
    parents = tape.parents
    owned: set[int] = set()  # indices whose gradient buffer may be mutated in place
    for i in range(output.index, lowest - 1, -1):
        g = grads.get(i) if i in keep else grads.pop(i, None)
        if g is None:
            continue
        owned.discard(i)
        for j, vjp in parents[i]:
            contrib = vjp(g)
            if isinstance(contrib, IndexedGrad):
                buf = grads.get(j)
                if buf is None:
                    grads[j] = contrib.dense()
                    owned.add(j)
                else:
                    if j not in owned:
                        buf = np.array(buf, dtype=np.float64)
                        grads[j] = buf
                        owned.add(j)
                    contrib.add_into(buf)
            elif j in grads:
                if j in owned and np.shape(contrib) == grads[j].shape:
                    grads[j] += contrib
                else:
                    grads[j] = grads[j] + contrib
                    owned.add(j)
            else:
                grads[j] = contrib
    out = [np.array(grads.get(t.index, np.zeros(np.shape(t.value))), dtype=np.float64)
           .reshape(np.shape(t.value)) for t in targets]
    return out[0] if single else out
