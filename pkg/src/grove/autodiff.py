"""Small reverse-mode tape over numpy arrays.

Define-by-run: every operation on a Var computes its value immediately and
records vector-Jacobian closures against the inputs that require gradients.
`backward` walks the recorded graph once and accumulates cotangents.

The op set is exactly what the Gaussian-process objectives need: elementwise
arithmetic, reductions, (batched) matmul, triangular solves, and a Cholesky
primitive whose backward pass follows the standard symmetric formula
  Abar = 0.5 * L^{-T} (P + P^T) L^{-1},  P = phi(L^T Lbar),
with phi taking the lower triangle and halving the diagonal.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from . import numerics


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Var:
    """A node in the computation graph: a float64 ndarray plus its history."""

    __slots__ = ("value", "parents", "is_leaf")

    def __init__(self, value, parents=(), is_leaf=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Var, vjp) for inputs needing grads
        self.is_leaf = is_leaf

    @property
    def shape(self):
        return self.value.shape

    @property
    def requires_grad(self):
        return self.is_leaf or bool(self.parents)

    # -- elementwise arithmetic ------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, np.add,
                       lambda a, b, g: g, lambda a, b, g: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract,
                       lambda a, b, g: g, lambda a, b, g: -g)

    def __rsub__(self, other):
        return _promote(other) - self

    def __mul__(self, other):
        return _binary(self, other, np.multiply,
                       lambda a, b, g: g * b, lambda a, b, g: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, np.divide,
                       lambda a, b, g: g / b, lambda a, b, g: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _promote(other) / self

    def __neg__(self):
        return _unary(self, -self.value, lambda g: -g)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        e = float(exponent)
        x = self.value
        return _unary(self, x ** e, lambda g: g * e * x ** (e - 1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_promote(other), self)

    # -- elementwise functions -------------------------------------------------

    def exp(self):
        out = np.exp(self.value)
        return _unary(self, out, lambda g: g * out)

    def log(self):
        x = self.value
        return _unary(self, np.log(x), lambda g: g / x)

    def sqrt(self):
        out = np.sqrt(self.value)
        return _unary(self, out, lambda g: 0.5 * g / out)

    def square(self):
        x = self.value
        return _unary(self, x * x, lambda g: 2.0 * g * x)

    # -- reductions / shape ----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        x = self.value

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, x.shape).astype(np.float64)
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, x.shape).astype(np.float64)

        return _unary(self, np.sum(x, axis=axis, keepdims=keepdims), vjp)

    def reshape(self, shape):
        x_shape = self.value.shape
        return _unary(self, self.value.reshape(shape), lambda g: g.reshape(x_shape))

    def transpose(self, axes=None):
        x = self.value
        if axes is None:
            axes_eff = tuple(reversed(range(x.ndim)))
        else:
            axes_eff = tuple(axes)
        inverse = np.argsort(axes_eff)
        return _unary(self, x.transpose(axes_eff), lambda g: g.transpose(inverse))

    @property
    def T(self):
        return self.transpose()


def leaf(value) -> Var:
    """A gradient root: backward() will report a gradient for this node."""
    return Var(value, is_leaf=True)


def const(value) -> Var:
    return Var(value)


def _promote(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unary(a: Var, out, vjp) -> Var:
    parents = ((a, vjp),) if a.requires_grad else ()
    return Var(out, parents)


def _binary(a, b, fn, da, db) -> Var:
    a, b = _promote(a), _promote(b)
    av, bv = a.value, b.value
    out = fn(av, bv)
    parents = []
    if a.requires_grad:
        parents.append((a, lambda g: _unbroadcast(da(av, bv, g), av.shape)))
    if b.requires_grad:
        parents.append((b, lambda g: _unbroadcast(db(av, bv, g), bv.shape)))
    return Var(out, tuple(parents))


def clip_min(a: Var, floor: float) -> Var:
    """max(a, floor); gradient is zero where the floor is active."""
    a = _promote(a)
    x = a.value
    mask = x >= floor
    return _unary(a, np.where(mask, x, floor), lambda g: g * mask)


def matmul(a, b) -> Var:
    a, b = _promote(a), _promote(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = np.matmul(av, bv)
    parents = []
    if a.requires_grad:
        parents.append((a, lambda g: _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)))
    if b.requires_grad:
        parents.append((b, lambda g: _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)))
    return Var(out, tuple(parents))


def take_rows(a: Var, idx) -> Var:
    a = _promote(a)
    idx = np.asarray(idx, dtype=np.intp)
    x = a.value

    def vjp(g):
        z = np.zeros_like(x)
        np.add.at(z, idx, g)
        return z

    return _unary(a, x[idx], vjp)


def diag_part(a: Var) -> Var:
    """Extract the main diagonal of the trailing two axes."""
    a = _promote(a)
    x = a.value
    n = x.shape[-1]
    rng = np.arange(n)

    def vjp(g):
        z = np.zeros_like(x)
        z[..., rng, rng] = g
        return z

    return _unary(a, x[..., rng, rng].copy(), vjp)


def diag_matrix(v: Var) -> Var:
    """Embed a (..., M) vector as the diagonal of a (..., M, M) matrix."""
    v = _promote(v)
    x = v.value
    n = x.shape[-1]
    rng = np.arange(n)
    out = np.zeros(x.shape + (n,), dtype=np.float64)
    out[..., rng, rng] = x
    return _unary(v, out, lambda g: g[..., rng, rng].copy())


def cholesky(a: Var, jitter: float = 0.0) -> Var:
    """Lower Cholesky factor of a symmetric matrix, with the jitter ladder."""
    a = _promote(a)
    factor = numerics.cholesky(a.value, jitter=jitter)
    lower = factor.lower

    def vjp(g):
        lbar = np.tril(g)
        p = lower.T @ lbar
        phi = np.tril(p)
        np.fill_diagonal(phi, 0.5 * np.diag(p))
        # w = L^{-T} phi L^{-1}
        half = scipy.linalg.solve_triangular(lower, phi, lower=True, trans="T")
        w = scipy.linalg.solve_triangular(lower, half.T, lower=True, trans="T").T
        return 0.5 * (w + w.T)

    return _unary(a, lower, vjp)


def _fold_solve(lower: np.ndarray, b: np.ndarray, trans: bool) -> np.ndarray:
    """Triangular solve with optional leading batch dimensions on b."""
    t = "T" if trans else "N"
    if b.ndim <= 2:
        return scipy.linalg.solve_triangular(lower, b, lower=True, trans=t)
    m = b.shape[-2]
    lead = b.shape[:-2]
    folded = np.moveaxis(b, -2, 0).reshape(m, -1)
    solved = scipy.linalg.solve_triangular(lower, folded, lower=True, trans=t)
    return np.moveaxis(solved.reshape((m,) + lead + b.shape[-1:]), 0, -2)


def tri_solve(lower, b, trans: bool = False) -> Var:
    """Solve L x = b (or L^T x = b when trans) for lower-triangular L.

    b may carry leading batch dimensions; L is always a single (M, M) matrix.
    """
    lower, b = _promote(lower), _promote(b)
    lval, bval = lower.value, b.value
    x = _fold_solve(lval, bval, trans)
    parents = []
    if b.requires_grad or lower.requires_grad:
        def bbar_of(g):
            return _fold_solve(lval, g, not trans)

        if b.requires_grad:
            parents.append((b, bbar_of))
        if lower.requires_grad:
            m = lval.shape[0]

            def _fold(arr):
                if arr.ndim == 1:
                    return arr.reshape(m, 1)
                return np.moveaxis(arr, -2, 0).reshape(m, -1)

            if not trans:
                # L x = b:  Lbar = -tril(sum_batch Bbar x^T)
                def lbar_of(g):
                    return -np.tril(_fold(bbar_of(g)) @ _fold(x).T)
            else:
                # L^T x = b:  Lbar = -tril(sum_batch x Bbar^T)
                def lbar_of(g):
                    return -np.tril(_fold(x) @ _fold(bbar_of(g)).T)

            parents.append((lower, lbar_of))
    return Var(x, tuple(parents))


def backward(root: Var, wrt) -> list:
    """Gradients of a scalar root with respect to each Var in wrt."""
    if root.value.shape != ():
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")

    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    grads = {id(root): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = np.asarray(contribution, dtype=np.float64)

    return [
        np.asarray(grads.get(id(v), np.zeros_like(v.value)), dtype=np.float64).reshape(v.value.shape)
        for v in wrt
    ]
