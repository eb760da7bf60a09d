"""Dense linear-algebra helpers shared by every model component.

All public functions operate on C-contiguous float64 arrays and validate
finiteness on the way in.  Factorizations are delegated to numpy/scipy;
what this module adds is the contract: a jitter ladder for marginally
positive-definite matrices, triangular solves against a stored factor,
and a finite-difference gradient checker used to verify every analytic
gradient in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
import scipy.linalg

from .errors import NonFiniteValue, NotPositiveDefinite, ShapeMismatch

JITTER_START = 1e-6
JITTER_CAP = 1e-2


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 array."""
    out = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue(f"{name} contains NaN or infinity")
    return out


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T == m + jitter_used * I."""

    lower: np.ndarray
    jitter_used: float

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def cholesky(m, jitter: float = 0.0) -> CholeskyFactor:
    """Factor a symmetric positive-definite matrix, escalating jitter on failure.

    The first attempt uses exactly the requested jitter.  If the plain
    factorization fails, the diagonal bump escalates through
    JITTER_START * 10**k until JITTER_CAP, after which
    NotPositiveDefinite is raised.
    """
    m = as_matrix(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatch(f"cholesky needs a square matrix, got {m.shape}")
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    sym_err = np.max(np.abs(m - m.T)) if m.size else 0.0
    if sym_err > 1e-8:
        raise ShapeMismatch(f"matrix is not symmetric (max asymmetry {sym_err:.3e})")

    n = m.shape[0]
    eye = np.eye(n)
    current = float(jitter)
    while True:
        try:
            lower = np.linalg.cholesky(m + current * eye if current else m)
            return CholeskyFactor(lower=lower, jitter_used=current)
        except np.linalg.LinAlgError:
            nxt = JITTER_START if current < JITTER_START else current * 10.0
            if nxt > JITTER_CAP:
                raise NotPositiveDefinite(
                    f"matrix is not positive definite even with jitter {JITTER_CAP:g}"
                ) from None
            current = nxt


def solve_triangular(f: CholeskyFactor, b, side: str = "lower") -> np.ndarray:
    """Solve L x = b ("lower") or L.T x = b ("lower_t") against a stored factor."""
    if side not in ("lower", "lower_t"):
        raise ValueError(f"side must be 'lower' or 'lower_t', got {side!r}")
    b = as_matrix(b, "rhs")
    if b.shape[0] != f.dim:
        raise ShapeMismatch(f"rhs has {b.shape[0]} rows, factor dim is {f.dim}")
    return scipy.linalg.solve_triangular(
        f.lower, b, lower=True, trans="T" if side == "lower_t" else "N"
    )


def log_det(f: CholeskyFactor) -> float:
    """log det of the factored matrix: 2 * sum(log diag L)."""
    diag = np.diag(f.lower)
    if np.any(diag <= 0):
        raise NotPositiveDefinite("factor has a nonpositive diagonal entry")
    return float(2.0 * np.sum(np.log(diag)))


def grad_check(
    f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    p,
    eps: float = 1e-5,
) -> float:
    """Compare an analytic gradient against central finite differences.

    `f` maps a parameter vector to (value, gradient).  Returns the max over
    coordinates of |g_fd - g| / max(1, |g_fd|); anything above ~1e-4 means
    the analytic gradient is wrong.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    p = as_matrix(p, "parameters").ravel()
    value, grad = f(p)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != p.shape:
        raise ShapeMismatch(f"gradient shape {grad.shape} != parameter shape {p.shape}")
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteValue("function value or analytic gradient is not finite")

    worst = 0.0
    for i in range(p.size):
        step = np.zeros_like(p)
        step[i] = eps
        hi, _ = f(p + step)
        lo, _ = f(p - step)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteValue(f"finite-difference probe at coordinate {i} is not finite")
        g_fd = (hi - lo) / (2.0 * eps)
        err = abs(g_fd - grad[i]) / max(1.0, abs(g_fd))
        worst = max(worst, err)
    return worst
