"""Covariance functions over latent points, with analytic gradients.

Four families: rbf, matern15, matern25, cosine.  The smooth families share a
single lengthscale ell and a fixed output scale s:

    rbf       k(a, b) = s * exp(-||a - b||^2 / (2 ell^2))
    matern15  k(a, b) = s * (1 + sqrt(3) d / ell) * exp(-sqrt(3) d / ell)
    matern25  k(a, b) = s * (1 + sqrt(5) d / ell + 5 d^2 / (3 ell^2))
                          * exp(-sqrt(5) d / ell)
    cosine    k(a, b) = <a, b> / (||a|| ||b||)        (no lengthscale)

Hyperparameters are stored as unconstrained logs so optimizers can update
them freely; `kernel_gradients` reports the gradient with respect to the
positive lengthscale, and the chain rule through exp() happens wherever the
log-space parameter lives.  `kernel_gradients(spec, a, b, upstream)` is a
vector-Jacobian product: contract an upstream cotangent (same shape as the
kernel matrix) against the kernel's Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteValue, ShapeMismatch
from .numerics import as_matrix

FAMILIES = ("rbf", "matern15", "matern25", "cosine")


@dataclass
class KernelSpec:
    family: str
    log_lengthscale: np.ndarray
    log_output_scale: np.ndarray

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; pick one of {FAMILIES}")
        self.log_lengthscale = np.asarray(self.log_lengthscale, dtype=np.float64)
        self.log_output_scale = np.asarray(self.log_output_scale, dtype=np.float64)
        if not (np.isfinite(self.log_lengthscale) and np.isfinite(self.log_output_scale)):
            raise NonFiniteValue("kernel hyperparameters must be finite in log space")

    @classmethod
    def create(cls, family: str, lengthscale: float = 1.0, output_scale: float = 1.0):
        if lengthscale <= 0 or output_scale <= 0:
            raise ValueError("lengthscale and output_scale must be positive")
        return cls(family, np.log(np.float64(lengthscale)), np.log(np.float64(output_scale)))

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    @property
    def output_scale(self) -> float:
        return float(np.exp(self.log_output_scale))


@dataclass(frozen=True)
class KernelGradients:
    d_lengthscale: float
    d_a: np.ndarray
    d_b: np.ndarray


def _check_inputs(spec: KernelSpec, a: np.ndarray, b: np.ndarray):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"kernel inputs must share their column count, got {a.shape} and {b.shape}")
    if spec.family == "cosine":
        for name, m in (("a", a), ("b", b)):
            if np.any(np.linalg.norm(m, axis=1) == 0.0):
                raise NonFiniteValue(f"cosine kernel input {name} has a zero row")


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    r2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.maximum(r2, 0.0)


def kernel_matrix(spec: KernelSpec, a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    _check_inputs(spec, a, b)
    s = spec.output_scale
    if spec.family == "cosine":
        an = a / np.linalg.norm(a, axis=1, keepdims=True)
        bn = b / np.linalg.norm(b, axis=1, keepdims=True)
        return np.clip(an @ bn.T, -1.0, 1.0)
    ell = spec.lengthscale
    r2 = _sqdist(a, b)
    if spec.family == "rbf":
        return s * np.exp(-r2 / (2.0 * ell * ell))
    d = np.sqrt(r2)
    if spec.family == "matern15":
        c = math.sqrt(3.0) / ell
        return s * (1.0 + c * d) * np.exp(-c * d)
    c = math.sqrt(5.0) / ell
    return s * (1.0 + c * d + (c * d) ** 2 / 3.0) * np.exp(-c * d)


def kernel_diag(spec: KernelSpec, x) -> np.ndarray:
    """k(x_i, x_i) for each row; constant for every supported family."""
    x = as_matrix(x, "x")
    _check_inputs(spec, x, x)
    fill = 1.0 if spec.family == "cosine" else spec.output_scale
    return np.full(x.shape[0], fill, dtype=np.float64)


def kernel_gradients(spec: KernelSpec, a, b, upstream) -> KernelGradients:
    """Contract an upstream cotangent against d k / d (ell, a, b).

    For the cosine family the lengthscale gradient is identically zero.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    u = as_matrix(upstream, "upstream")
    _check_inputs(spec, a, b)
    if u.shape != (a.shape[0], b.shape[0]):
        raise ShapeMismatch(f"upstream shape {u.shape} != kernel shape {(a.shape[0], b.shape[0])}")
    s = spec.output_scale

    if spec.family == "cosine":
        na = np.linalg.norm(a, axis=1, keepdims=True)
        nb = np.linalg.norm(b, axis=1, keepdims=True)
        an, bn = a / na, b / nb
        k = an @ bn.T
        d_a = (u @ bn - (u * k).sum(axis=1, keepdims=True) * an) / na
        d_b = (u.T @ an - (u * k).sum(axis=0)[:, None] * bn) / nb
        return KernelGradients(0.0, d_a, d_b)

    ell = spec.lengthscale
    r2 = _sqdist(a, b)
    if spec.family == "rbf":
        k = s * np.exp(-r2 / (2.0 * ell * ell))
        d_ell = float(np.sum(u * k * r2) / ell**3)
        w = u * k / ell**2          # -dk/d(a_i - b_j) contraction weight
    elif spec.family == "matern15":
        d = np.sqrt(r2)
        c = math.sqrt(3.0) / ell
        e = s * np.exp(-c * d)
        d_ell = float(np.sum(u * c * c * r2 * e) / ell)
        w = u * c * c * e           # -(dk/dd)/d, smooth at d == 0
    else:
        d = np.sqrt(r2)
        c = math.sqrt(5.0) / ell
        e = s * np.exp(-c * d)
        d_ell = float(np.sum(u * (c * c * r2 / 3.0) * (1.0 + c * d) * e) / ell)
        w = u * (c * c / 3.0) * (1.0 + c * d) * e

    # dk/da_i = w_ij (b_j - a_i), dk/db_j = w_ij (a_i - b_j)
    d_a = w @ b - w.sum(axis=1)[:, None] * a
    d_b = w.T @ a - w.sum(axis=0)[:, None] * b
    return KernelGradients(d_ell, d_a, d_b)


def kernel_op(family: str, a: ad.Var, b: ad.Var, lengthscale: ad.Var, output_scale: float) -> ad.Var:
    """Tape primitive: kernel matrix whose backward pass is kernel_gradients."""
    ell = float(lengthscale.value)
    if not (math.isfinite(ell) and ell > 0.0):
        # exp() of a far-gone log-lengthscale under- or overflowed
        raise NonFiniteValue(f"lengthscale degenerated to {ell}")
    spec = KernelSpec.create(family, ell, output_scale)
    value = kernel_matrix(spec, a.value, b.value)

    parents = []
    cache = []  # [upstream, KernelGradients] for the current backward pass

    def grads(g):
        if not cache or cache[0] is not g:
            cache[:] = [g, kernel_gradients(spec, a.value, b.value, g)]
        return cache[1]

    if a.requires_grad:
        parents.append((a, lambda g: grads(g).d_a))
    if b.requires_grad:
        parents.append((b, lambda g: grads(g).d_b))
    if lengthscale.requires_grad and family != "cosine":
        parents.append((lengthscale, lambda g: np.asarray(grads(g).d_lengthscale)))
    return ad.Var(value, tuple(parents))
