"""Reverse-mode automatic differentiation over numpy arrays.

A small tape sufficient for the variational objectives in this package:
elementwise arithmetic with broadcasting, reductions, matrix products,
Cholesky factorization, and triangular solves. Gradients are exact; the
finite-difference checker in :mod:`ldgd.training` validates them end to end.

Design notes:

* Every node is a :class:`Var` holding a float64 array plus a closure that
  maps the node's output gradient to its parents' gradients (a VJP).
* Constants may be passed as plain arrays/scalars anywhere a ``Var`` is
  accepted; they are lifted to leaf nodes whose gradients are simply unused.
* ``backward`` runs an iterative topological sort, so graph depth is not
  limited by the Python recursion limit.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit


class Var:
    """A node in the computation graph.

    ``value`` is a float64 ndarray. After :func:`backward` on a scalar root,
    ``grad`` holds d(root)/d(value), same shape as ``value``.
    """

    __slots__ = ("value", "grad", "_parents", "_vjp")

    # Make numpy defer binary ops to our reflected methods instead of
    # broadcasting Var objects elementwise.
    __array_ufunc__ = None

    def __init__(self, value, _parents: tuple = (), _vjp: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # -- operator sugar -----------------------------------------------------

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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Var(a.value + b.value, (a, b), vjp)


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Var(a.value - b.value, (a, b), vjp)


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Var(a.value * b.value, (a, b), vjp)


def div(a, b) -> Var:
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    return Var(a.value / b.value, (a, b), vjp)


def neg(a) -> Var:
    a = _lift(a)
    return Var(-a.value, (a,), lambda g: (-g,))


def power(a, p) -> Var:
    a = _lift(a)
    p = float(p)

    def vjp(g):
        return (g * p * a.value ** (p - 1.0),)

    return Var(a.value**p, (a,), vjp)


def exp(a) -> Var:
    a = _lift(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = _lift(a)
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Var:
    a = _lift(a)
    out = np.sqrt(a.value)
    return Var(out, (a,), lambda g: (g * (0.5 / out),))


def softplus(a) -> Var:
    """log(1 + exp(a)), computed stably."""
    a = _lift(a)
    out = np.logaddexp(0.0, a.value)
    return Var(out, (a,), lambda g: (g * expit(a.value),))


def clip_min(a, lo: float) -> Var:
    """Elementwise max(a, lo); gradient is zero where the floor is active."""
    a = _lift(a)
    mask = a.value > lo
    return Var(np.maximum(a.value, lo), (a,), lambda g: (g * mask,))


# -- reductions and reshapes ---------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False) -> Var:
    a = _lift(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return Var(out, (a,), vjp)


def reshape(a, shape) -> Var:
    a = _lift(a)
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.value.shape),))


def transpose(a) -> Var:
    a = _lift(a)
    if a.value.ndim != 2:
        raise ValueError("transpose expects a 2-D array")
    return Var(a.value.T, (a,), lambda g: (g.T,))


def transpose_axes(a, axes: Sequence[int]) -> Var:
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Var(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    parts = [_lift(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp)


def take_rows(a, idx) -> Var:
    """Row gather a[idx]; the backward pass scatter-adds."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=int)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.value[idx], (a,), vjp)


def diag_part(a) -> Var:
    a = _lift(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.fill_diagonal(out, g)
        return (out,)

    return Var(np.diagonal(a.value).copy(), (a,), vjp)


def diag_embed(v) -> Var:
    v = _lift(v)
    return Var(np.diag(v.value), (v,), lambda g: (np.diagonal(g).copy(),))


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D arrays")

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return Var(a.value @ b.value, (a, b), vjp)


def cholesky(a, jitter: float = 0.0) -> Var:
    """Lower Cholesky factor of ``a + jitter * I``.

    The jitter is treated as a constant; raising
    ``numpy.linalg.LinAlgError`` is the caller's signal to escalate it.
    """
    a = _lift(a)
    amat = a.value
    if jitter:
        amat = amat + jitter * np.eye(amat.shape[0])
    lmat = np.linalg.cholesky(amat)

    def vjp(g):
        # Standard reverse rule: A_bar = sym(L^{-T} phi(L^T g) L^{-1}) with
        # phi = lower triangle, diagonal halved.
        p = np.tril(lmat.T @ g)
        p[np.diag_indices_from(p)] *= 0.5
        w = solve_triangular(lmat, p, lower=True, trans="T", check_finite=False)
        s = solve_triangular(lmat, w.T, lower=True, trans="T", check_finite=False).T
        return (0.5 * (s + s.T),)

    return Var(lmat, (a,), vjp)


def solve_tri(l, b, trans: bool = False) -> Var:
    """Solve L x = b (or L^T x = b when ``trans``) for lower-triangular L."""
    l, b = _lift(l), _lift(b)
    x = solve_triangular(l.value, b.value, lower=True, trans="T" if trans else "N", check_finite=False)

    if not trans:

        def vjp(g):
            gb = solve_triangular(l.value, g, lower=True, trans="T", check_finite=False)
            return -np.tril(gb @ x.T), gb

    else:

        def vjp(g):
            gb = solve_triangular(l.value, g, lower=True, trans="N", check_finite=False)
            return -np.tril(x @ gb.T), gb

    return Var(x, (l, b), vjp)


# -- backward pass -------------------------------------------------------------


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar ``root`` into every reachable node."""
    if root.value.size != 1:
        raise ValueError("backward requires a scalar root")
    order: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g
