"""Vectorized forward-mode dual numbers.

A :class:`Dual` holds an array of values and, in a trailing axis, the
derivatives of those values along ``P`` seed directions.  The module-level
functions dispatch on their arguments, so numeric code written against them
runs unchanged on plain ndarrays (fast path) or on duals (sensitivity path).
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("val", "tan")
    __array_priority__ = 1000

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=float)
        self.tan = np.asarray(tan, dtype=float)
        if self.tan.shape[:-1] != self.val.shape:
            raise ValueError(f"tangent shape {self.tan.shape} does not match value shape {self.val.shape}")

    @classmethod
    def seed(cls, val, offset: int, n_dirs: int) -> "Dual":
        """Identity seed: entry ``i`` of ``val`` gets direction ``offset + i``."""
        val = np.asarray(val, dtype=float)
        tan = np.zeros(val.shape + (n_dirs,))
        flat = tan.reshape(val.size, n_dirs)
        flat[np.arange(val.size), offset + np.arange(val.size)] = 1.0
        return cls(val, tan)

    @classmethod
    def constant(cls, val, n_dirs: int) -> "Dual":
        val = np.asarray(val, dtype=float)
        return cls(val, np.zeros(val.shape + (n_dirs,)))

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    @property
    def n_dirs(self):
        return self.tan.shape[-1]

    def __len__(self):
        return len(self.val)

    def __repr__(self):
        return f"Dual(shape={self.shape}, n_dirs={self.n_dirs})"

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.val[idx], self.tan[idx + (slice(None),)])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        val = self.val.reshape(shape)
        return Dual(val, self.tan.reshape(val.shape + (self.n_dirs,)))

    def ravel(self):
        return self.reshape(-1)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], tuple):
            axes = axes[0]
        return Dual(self.val.transpose(axes), self.tan.transpose(tuple(axes) + (self.ndim,)))

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None):
        if axis is None:
            return Dual(self.val.sum(), self.tan.reshape(-1, self.n_dirs).sum(axis=0))
        axis = axis % self.ndim
        return Dual(self.val.sum(axis=axis), self.tan.sum(axis=axis))

    def _bcast(self, shape):
        if self.shape == shape:
            return self.tan
        return np.broadcast_to(self.tan, tuple(shape) + (self.n_dirs,))

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __add__(self, other):
        if isinstance(other, Dual):
            val = self.val + other.val
            return Dual(val, self._bcast(val.shape) + other._bcast(val.shape))
        val = self.val + other
        return Dual(val, np.array(self._bcast(val.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val,
                        self.tan * other.val[..., None] + self.val[..., None] * other.tan)
        c = np.asarray(other, dtype=float)
        return Dual(self.val * c, self.tan * c[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return self * other.reciprocal()
        c = np.asarray(other, dtype=float)
        return Dual(self.val / c, self.tan / c[..., None])

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def reciprocal(self):
        inv = 1.0 / self.val
        return Dual(inv, -self.tan * (inv * inv)[..., None])

    def __pow__(self, p):
        if p == 2:
            return self * self
        return Dual(self.val ** p, self.tan * (p * self.val ** (p - 1))[..., None])

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    # comparisons act on values; they feed masks and gates, never derivatives
    def __lt__(self, other):
        return self.val < value(other)

    def __le__(self, other):
        return self.val <= value(other)

    def __gt__(self, other):
        return self.val > value(other)

    def __ge__(self, other):
        return self.val >= value(other)


def is_dual(x) -> bool:
    return isinstance(x, Dual)


def value(x):
    return x.val if isinstance(x, Dual) else x


def n_dirs_of(*xs) -> int | None:
    for x in xs:
        if isinstance(x, Dual):
            return x.n_dirs
    return None


def _unary(x, f, df):
    if isinstance(x, Dual):
        return Dual(f(x.val), x.tan * df(x.val)[..., None])
    return f(x)


def sqrt(x):
    def dsqrt(v):
        with np.errstate(divide="ignore"):
            d = 0.5 / np.sqrt(v)
        return np.where(np.isfinite(d), d, 0.0)
    return _unary(x, np.sqrt, dsqrt)


def sin(x):
    return _unary(x, np.sin, np.cos)


def cos(x):
    return _unary(x, np.cos, lambda v: -np.sin(v))


def tan(x):
    return _unary(x, np.tan, lambda v: 1.0 / np.cos(v) ** 2)


def tanh(x):
    return _unary(x, np.tanh, lambda v: 1.0 - np.tanh(v) ** 2)


def exp(x):
    return _unary(x, np.exp, np.exp)


def log(x):
    return _unary(x, np.log, lambda v: 1.0 / v)


def where(cond, a, b):
    """Select elementwise; the unselected branch contributes no derivative."""
    cond = np.asarray(cond, dtype=bool)
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.where(cond, a, b)
    n = n_dirs_of(a, b)
    va, vb = value(a), value(b)
    val = np.where(cond, va, vb)
    ta = a.tan if isinstance(a, Dual) else np.zeros(np.shape(va) + (n,))
    tb = b.tan if isinstance(b, Dual) else np.zeros(np.shape(vb) + (n,))
    return Dual(val, np.where(cond[..., None], ta, tb))


def hinge(x):
    """max(x, 0) with zero derivative on the inactive side."""
    return where(value(x) > 0.0, x, 0.0)


def maximum(x, floor: float):
    return where(value(x) > floor, x, floor)


def clip(x, lo, hi):
    v = value(x)
    return where((v > lo) & (v < hi), x, np.clip(v, lo, hi))


def stack(xs, axis=0):
    if not any(isinstance(x, Dual) for x in xs):
        return np.stack(xs, axis=axis)
    n = n_dirs_of(*xs)
    duals = [x if isinstance(x, Dual) else Dual.constant(x, n) for x in xs]
    shape = np.broadcast_shapes(*(d.shape for d in duals))
    vals = [np.broadcast_to(d.val, shape) for d in duals]
    tans = [np.broadcast_to(d.tan, shape + (n,)) for d in duals]
    axis = axis % (len(shape) + 1)
    return Dual(np.stack(vals, axis=axis), np.stack(tans, axis=axis))


def concatenate(xs, axis=0):
    if not any(isinstance(x, Dual) for x in xs):
        return np.concatenate(xs, axis=axis)
    n = n_dirs_of(*xs)
    duals = [x if isinstance(x, Dual) else Dual.constant(x, n) for x in xs]
    axis = axis % duals[0].ndim
    return Dual(np.concatenate([d.val for d in duals], axis=axis),
                np.concatenate([d.tan for d in duals], axis=axis))


def einsum(subscripts: str, a, b):
    """Two-operand einsum; the tangent axis is threaded through as ``z``."""
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.einsum(subscripts, a, b, optimize=True)
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    val = np.einsum(subscripts, value(a), value(b), optimize=True)
    tan = 0.0
    if isinstance(a, Dual):
        tan = tan + np.einsum(f"{sa}z,{sb}->{out}z", a.tan, value(b), optimize=True)
    if isinstance(b, Dual):
        tan = tan + np.einsum(f"{sa},{sb}z->{out}z", value(a), b.tan, optimize=True)
    return Dual(val, tan)


def matmul(a, b):
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.matmul(a, b)
    na, nb = np.ndim(value(a)), np.ndim(value(b))
    if na == 2 and nb == 2:
        return einsum("ij,jk->ik", a, b)
    if na == 2 and nb == 1:
        return einsum("ij,j->i", a, b)
    if na == 1 and nb == 2:
        return einsum("j,jk->k", a, b)
    if na == 1 and nb == 1:
        return einsum("j,j->", a, b)
    raise ValueError("matmul supports 1-D and 2-D operands only")
