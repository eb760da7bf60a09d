"""Sparse variational Gaussian process with per-output-dimension posteriors.

One GP maps Q-dimensional latent points to D-dimensional embeddings.  All D
output dimensions share the kernel, a constant mean m, and a noise variance
sigma^2; each dimension d keeps its own variational posterior over inducing
values, q(u^d) = N(mu^d, S^d) with S^d = L^d L^d^T.

The evidence lower bound for one dimension, with minibatch B drawn from
n_total rows, inducing inputs v, and A = k(x, v) k(v, v)^{-1}:

    mean_hat   = m + A (mu^d - m)
    c          = k(x, x)_diag - rowdiag(A (k(v,v) - S^d) A^T)
    ELBO^d     = (n_total / B) * sum_b [ log N(z_b^d; mean_hat_b, sigma^2)
                                         - c_b / (2 sigma^2) ]
                 - KL(q(u^d) || N(m 1, k(v,v)))

and the reported elbo is the sum over d.  The Gaussian expectation is exact,
no sampling anywhere.  Predictions use the same mean_hat and c (optionally
plus sigma^2); variances that dip below 1e-12 are clamped and counted.

Raw parameterization: kernel hyperparameters and the noise live in log
space; the variational factor stores strict-lower entries raw and the
diagonal in log space, so every parameter is unconstrained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch
from .kernels import KernelSpec, kernel_op
from .numerics import JITTER_START, as_matrix

VARIANCE_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)

# Fixed nugget added to the inducing covariance before factorization.  The
# latent points start in a tight cluster, so k(v, v) is routinely a hair from
# singular; a constant nugget keeps its inverse (and every gradient through
# it) bounded instead of letting a barely-successful factorization blow the
# loss up.  Part of the model, mirrored by the tests' reference computations.
PRIOR_NUGGET = JITTER_START

# Module-wide tally of predictive variances that had to be clamped up to the
# floor.  Purely diagnostic; reset at will.
NEGATIVE_VARIANCE_CLAMPS = 0


def negative_variance_clamp_count() -> int:
    return NEGATIVE_VARIANCE_CLAMPS


def reset_clamp_count() -> None:
    global NEGATIVE_VARIANCE_CLAMPS
    NEGATIVE_VARIANCE_CLAMPS = 0


def _note_clamps(n: int) -> None:
    global NEGATIVE_VARIANCE_CLAMPS
    NEGATIVE_VARIANCE_CLAMPS += n


@dataclass(frozen=True)
class PredictiveGaussian:
    mean: np.ndarray
    variance: np.ndarray
    includes_noise: bool


@dataclass
class SparseGP:
    kernel: KernelSpec
    mean_const: np.ndarray   # scalar, shared across output dimensions
    log_noise: np.ndarray    # scalar, log of sigma^2
    inducing: np.ndarray     # (M, Q)
    var_mean: np.ndarray     # (M, D)
    var_chol: np.ndarray     # (D, M, M) raw full factor or (D, M) raw diagonal
    variational: str = "full"

    def __post_init__(self):
        self.mean_const = np.asarray(self.mean_const, dtype=np.float64)
        self.log_noise = np.asarray(self.log_noise, dtype=np.float64)
        self.inducing = as_matrix(self.inducing, "inducing")
        self.var_mean = as_matrix(self.var_mean, "var_mean")
        self.var_chol = np.ascontiguousarray(self.var_chol, dtype=np.float64)
        if self.variational not in ("full", "diagonal"):
            raise ValueError(f"variational mode must be full or diagonal, got {self.variational!r}")
        m, d = self.var_mean.shape
        want = (d, m, m) if self.variational == "full" else (d, m)
        if self.inducing.shape[0] != m or self.var_chol.shape != want:
            raise ShapeMismatch(
                f"inconsistent GP shapes: inducing {self.inducing.shape}, "
                f"var_mean {self.var_mean.shape}, var_chol {self.var_chol.shape}"
            )

    @property
    def m_inducing(self) -> int:
        return self.inducing.shape[0]

    @property
    def q_dim(self) -> int:
        return self.inducing.shape[1]

    @property
    def out_dim(self) -> int:
        return self.var_mean.shape[1]

    @property
    def noise_variance(self) -> float:
        return float(np.exp(self.log_noise))

    def chol_factors(self) -> np.ndarray:
        """Materialized variational factors: (D, M, M) lower, or (D, M) diagonals."""
        if self.variational == "full":
            strict = np.tril(self.var_chol, -1)
            rng = np.arange(self.m_inducing)
            strict[:, rng, rng] = np.exp(self.var_chol[:, rng, rng])
            return strict
        return np.exp(self.var_chol)

    @classmethod
    def create(cls, kernel: KernelSpec, q_dim: int, out_dim: int, m_inducing: int,
               variational: str = "full", mean_const: float = 0.0,
               noise_variance: float = 0.1, inducing=None) -> "SparseGP":
        """A fresh GP: zero-mean variational posterior with unit covariance."""
        if noise_variance <= 0:
            raise ValueError("noise_variance must be positive")
        if inducing is None:
            inducing = np.zeros((m_inducing, q_dim))
        shape = (out_dim, m_inducing, m_inducing) if variational == "full" else (out_dim, m_inducing)
        return cls(
            kernel=kernel,
            mean_const=np.float64(mean_const),
            log_noise=np.log(np.float64(noise_variance)),
            inducing=np.asarray(inducing, dtype=np.float64).copy(),
            var_mean=np.zeros((m_inducing, out_dim)),
            var_chol=np.zeros(shape),
            variational=variational,
        )


PARAM_NAMES = ("log_lengthscale", "log_noise", "mean_const", "inducing", "var_mean", "var_chol")


def gp_params(gp: SparseGP) -> dict:
    """The trainable arrays of one GP, keyed by canonical name."""
    return {
        "log_lengthscale": gp.kernel.log_lengthscale,
        "log_noise": gp.log_noise,
        "mean_const": gp.mean_const,
        "inducing": gp.inducing,
        "var_mean": gp.var_mean,
        "var_chol": gp.var_chol,
    }


class GPGraph:
    """The x-independent part of a GP's tape: build once, query many times.

    With `leaves=None` all parameters enter as constants, which is the fast
    path for inference where only the latent input needs a gradient.
    """

    def __init__(self, gp: SparseGP, leaves: dict | None = None,
                 nugget: float = PRIOR_NUGGET):
        self.gp = gp
        if leaves is None:
            leaves = {name: ad.const(arr) for name, arr in gp_params(gp).items()}
        self.leaves = leaves
        self.ell = leaves["log_lengthscale"].exp()
        self.noise = leaves["log_noise"].exp()
        self.v = leaves["inducing"]
        self.m = leaves["mean_const"]
        self.mu = leaves["var_mean"]

        kvv = kernel_op(gp.kernel.family, self.v, self.v, self.ell, gp.kernel.output_scale)
        self.lv = ad.cholesky(kvv, jitter=nugget)

        raw = leaves["var_chol"]
        mm = gp.m_inducing
        if gp.variational == "full":
            raw_diag = ad.diag_part(raw)                      # (D, M)
            strict_mask = np.tril(np.ones((mm, mm)), -1)
            self.ls = raw * ad.const(strict_mask) + ad.diag_matrix(raw_diag.exp())
            self.log_det_s = 2.0 * raw_diag.sum(axis=1)       # (D,)
            self.s_sqrt = None
        else:
            self.ls = None
            self.s_sqrt = raw.exp()                           # (D, M)
            self.log_det_s = 2.0 * raw.sum(axis=1)

        # k(x, x) is constant for every supported family
        self.kxx_fill = 1.0 if gp.kernel.family == "cosine" else gp.kernel.output_scale

    # -- pieces ---------------------------------------------------------------

    def predict_parts(self, x: ad.Var):
        """Marginal mean (B, D) and latent variance (B, D) at latent points x."""
        b = x.value.shape[0]
        kxv = kernel_op(self.gp.kernel.family, x, self.v, self.ell, self.gp.kernel.output_scale)
        u = ad.tri_solve(self.lv, kxv.T)                      # (M, B)
        a = ad.tri_solve(self.lv, u, trans=True).T            # (B, M)
        mean = self.m + a @ (self.mu - self.m)                # (B, D)
        qdiag = u.square().sum(axis=0).reshape((b, 1))        # (B, 1)
        if self.ls is not None:
            t = a @ self.ls                                   # (D, B, M)
            st = t.square().sum(axis=2).T                     # (B, D)
        else:
            st = a.square() @ self.s_sqrt.square().T          # (B, D)
        kxx = ad.const(np.full((b, 1), self.kxx_fill))
        var = kxx - qdiag + st
        _note_clamps(int(np.sum(var.value < VARIANCE_FLOOR)))
        return mean, ad.clip_min(var, VARIANCE_FLOOR)

    def predict_graph(self, x: ad.Var, with_noise: bool):
        mean, var = self.predict_parts(x)
        if with_noise:
            var = var + self.noise
        return mean, var

    def kl_graph(self) -> ad.Var:
        """Sum over output dimensions of KL(q(u^d) || p(u^d))."""
        mm = self.gp.m_inducing
        r = self.m - self.mu                                  # (M, D)
        wr = ad.tri_solve(self.lv, r)
        quad = wr.square().sum(axis=0)                        # (D,)
        logdet_kvv = 2.0 * ad.diag_part(self.lv).log().sum()
        if self.ls is not None:
            w = ad.tri_solve(self.lv, self.ls)                # (D, M, M)
            tr = w.square().sum(axis=(1, 2))                  # (D,)
        else:
            linv = ad.tri_solve(self.lv, ad.const(np.eye(mm)))
            diag_inv = linv.square().sum(axis=0)              # (M,) diag of Kvv^{-1}
            tr = (self.s_sqrt.square() * diag_inv).sum(axis=1)
        per_dim = 0.5 * (tr + quad - float(mm) + logdet_kvv - self.log_det_s)
        return per_dim.sum()

    def elbo_graph(self, x: ad.Var, z: np.ndarray, n_total: int) -> ad.Var:
        b, d = z.shape
        mean, var = self.predict_parts(x)
        resid = ad.const(z) - mean
        quad = (resid.square() + var).sum() / self.noise
        norm = (LOG_2PI + self.leaves["log_noise"]) * float(b * d)
        expect = -0.5 * (norm + quad)
        return (float(n_total) / float(b)) * expect - self.kl_graph()


def _check_latents(gp: SparseGP, x, name: str) -> np.ndarray:
    x = as_matrix(x, name)
    if x.ndim != 2 or x.shape[1] != gp.q_dim:
        raise ShapeMismatch(f"{name} must be (n, {gp.q_dim}), got {x.shape}")
    return x


def elbo(gp: SparseGP, x_batch, z_batch, n_total: int):
    """Evidence lower bound and its gradients.

    Returns (value, grads) where grads maps each parameter name plus
    "x_batch" to an array shaped like its parameter.
    """
    x_batch = _check_latents(gp, x_batch, "x_batch")
    z_batch = as_matrix(z_batch, "z_batch")
    if z_batch.shape != (x_batch.shape[0], gp.out_dim):
        raise ShapeMismatch(
            f"z_batch must be ({x_batch.shape[0]}, {gp.out_dim}), got {z_batch.shape}"
        )
    if n_total < x_batch.shape[0]:
        raise ValueError("n_total cannot be smaller than the batch")

    leaves = {name: ad.leaf(arr) for name, arr in gp_params(gp).items()}
    x_var = ad.leaf(x_batch)
    graph = GPGraph(gp, leaves)
    value = graph.elbo_graph(x_var, z_batch, n_total)
    ordered = list(PARAM_NAMES)
    grads = ad.backward(value, [leaves[n] for n in ordered] + [x_var])
    out = dict(zip(ordered, grads))
    out["x_batch"] = grads[-1]
    return float(value.value), out


def kl_inducing(gp: SparseGP) -> float:
    """KL(q(u^d) || p(u^d)) summed over output dimensions."""
    return float(GPGraph(gp).kl_graph().value)


def predict_arrays(gp: SparseGP, x_star, with_noise: bool = False):
    """Predictive means and variances as (T, D) arrays."""
    x_star = _check_latents(gp, x_star, "x_star")
    mean, var = GPGraph(gp).predict_graph(ad.const(x_star), with_noise)
    return mean.value, var.value


def predict(gp: SparseGP, x_star, with_noise: bool = False):
    """Per-row predictive Gaussians at new latent points."""
    means, variances = predict_arrays(gp, x_star, with_noise)
    return [
        PredictiveGaussian(mean=means[i].copy(), variance=variances[i].copy(),
                           includes_noise=with_noise)
        for i in range(means.shape[0])
    ]
