"""From a new deterministic embedding to a probabilistic one.

Given a trained model and an embedding z* from either modality, find the
latent point x* that maximizes the log-density of z* under that modality's
noisy GP predictive,

    objective(x) = sum_d log N(z*_d ; mean_d(x), var_d(x) + sigma^2),

by Adam ascent from several initializations, then read off the (noise-free,
by default) predictive Gaussian at the winner.  The first start is the
inducing location whose variational mean best matches z* — the model's own
summary of where in latent space such an output lives — and the remaining
restarts are seeded random draws around the inducing span, so the search
covers the region the model actually uses rather than a ball at the origin.
The scalar uncertainty attached to the result is the mean of the
per-dimension predictive variances.

Seeding: each restart draws its init from a stream keyed by (seed, restart),
and batch processing derives an independent seed per row via `derive_seed`,
so results never depend on how rows are grouped into batches.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import svgp
from .errors import NonFiniteLoss, ShapeMismatch
from .gplvm import AdamState, GroveModel, adam_step
from .svgp import GPGraph

LOG_2PI = math.log(2.0 * math.pi)


def derive_seed(seed: int, index: int) -> int:
    """A decorrelated child seed for row `index` (splitmix64 finalizer)."""
    mask = (1 << 64) - 1
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


@dataclass
class LatentFitConfig:
    restarts: int = 4
    steps: int = 200
    lr: float = 1e-2
    seed: int = 0

    def validate(self) -> "LatentFitConfig":
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        return self


@dataclass(frozen=True)
class ProbabilisticEmbedding:
    mean: np.ndarray        # (D,)
    variance: np.ndarray    # (D,)
    uncertainty: float      # mean of variance
    modality: str
    source_objective: float


def _pick_gp(model: GroveModel, modality: str):
    if modality == "image":
        return model.gp_image
    if modality == "text":
        return model.gp_text
    raise ValueError(f"modality must be image or text, got {modality!r}")


def _check_vector(gp, z_star, modality: str) -> np.ndarray:
    z = np.asarray(z_star, dtype=np.float64).reshape(-1)
    if z.shape[0] != gp.out_dim:
        raise ShapeMismatch(
            f"{modality} embeddings have dimension {gp.out_dim}, got {z.shape[0]}"
        )
    if not np.all(np.isfinite(z)):
        raise ShapeMismatch("embedding must be finite")
    return z


def _objective_and_grad(graph: GPGraph, x: np.ndarray, z: np.ndarray):
    """Log-density of z under the noisy predictive at x, and d/dx."""
    x_var = ad.leaf(x.reshape(1, -1))
    mean, var = graph.predict_graph(x_var, with_noise=True)
    resid = ad.const(z.reshape(1, -1)) - mean
    dens = -0.5 * (var.log() + resid.square() / var + LOG_2PI).sum()
    (grad,) = ad.backward(dens, [x_var])
    return float(dens.value), grad.reshape(-1)


def _anchor_point(gp, z: np.ndarray) -> np.ndarray:
    """Inducing location whose variational mean is closest to z.

    The variational means are the model's account of the function values at
    the inducing locations, so the best-matching row is a cheap guess at the
    right search basin — no training data needed."""
    resid = gp.var_mean - z[None, :]
    row = int(np.argmin(np.einsum("md,md->m", resid, resid)))
    return gp.inducing[row].astype(np.float64).copy()


def _fit_one(graph: GPGraph, z: np.ndarray, cfg: LatentFitConfig, init):
    """Best (objective, x) over restarts, every start point included."""
    gp = graph.gp
    q = gp.q_dim
    best_obj = -np.inf
    best_x = None
    for restart in range(cfg.restarts):
        if restart == 0:
            if init is not None:
                x = np.asarray(init, dtype=np.float64).reshape(q).copy()
            else:
                x = _anchor_point(gp, z)
        else:
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, restart)))
            x = gp.inducing[rng.integers(gp.m_inducing)] + 0.1 * rng.standard_normal(q)
        state = AdamState.create({"x": x})
        for step in range(cfg.steps + 1):
            value, grad = _objective_and_grad(graph, x, z)
            if not math.isfinite(value):
                raise NonFiniteLoss(
                    f"latent fit objective became non-finite (value={value})",
                    epoch=restart, batch=step,
                )
            if value > best_obj:
                best_obj = value
                best_x = x.copy()
            if step == cfg.steps:
                break
            adam_step({"x": x}, {"x": -grad}, state, cfg.lr)
    return best_x, best_obj


def infer_latent(model: GroveModel, z_star, modality: str,
                 cfg: LatentFitConfig | None = None, init=None):
    """Fit a latent point to one embedding; returns (x_star, objective)."""
    cfg = (cfg or LatentFitConfig()).validate()
    gp = _pick_gp(model, modality)
    z = _check_vector(gp, z_star, modality)
    graph = GPGraph(gp)
    return _fit_one(graph, z, cfg, init)


def _embed_on_graph(graph: GPGraph, model: GroveModel, z: np.ndarray, modality: str,
                    cfg: LatentFitConfig, with_noise: bool) -> ProbabilisticEmbedding:
    x_star, objective = _fit_one(graph, z, cfg, None)
    mean, var = graph.predict_graph(ad.const(x_star.reshape(1, -1)), with_noise)
    mean = mean.value[0].copy()
    var = var.value[0].copy()
    return ProbabilisticEmbedding(
        mean=mean,
        variance=var,
        uncertainty=float(var.mean()),
        modality=modality,
        source_objective=objective,
    )


def embed(model: GroveModel, z_star, modality: str,
          cfg: LatentFitConfig | None = None,
          with_noise: bool = False) -> ProbabilisticEmbedding:
    """Probabilistic embedding of one input vector."""
    cfg = (cfg or LatentFitConfig()).validate()
    gp = _pick_gp(model, modality)
    z = _check_vector(gp, z_star, modality)
    return _embed_on_graph(GPGraph(gp), model, z, modality, cfg, with_noise)


def _resolve_workers(workers, n_rows: int) -> int:
    if workers is None:
        env = os.environ.get("GROVE_THREADS", "").strip()
        if env:
            workers = int(env)
        else:
            workers = os.cpu_count() or 1
    return max(1, min(int(workers), n_rows))


# Worker-process state for the fork pool: set once per worker, reused for
# every row that lands there.
_POOL_STATE: dict = {}


def _pool_init(model, modality, cfg, with_noise):
    gp = _pick_gp(model, modality)
    _POOL_STATE["graph"] = GPGraph(gp)
    _POOL_STATE["model"] = model
    _POOL_STATE["modality"] = modality
    _POOL_STATE["cfg"] = cfg
    _POOL_STATE["with_noise"] = with_noise


def _pool_row(args):
    i, z = args
    cfg = dataclasses.replace(_POOL_STATE["cfg"],
                              seed=derive_seed(_POOL_STATE["cfg"].seed, i))
    return _embed_on_graph(_POOL_STATE["graph"], _POOL_STATE["model"], z,
                           _POOL_STATE["modality"], cfg, _POOL_STATE["with_noise"])


def batch_embed(model: GroveModel, z_matrix, modality: str,
                cfg: LatentFitConfig | None = None,
                with_noise: bool = False, workers=None) -> list:
    """Row-wise embed with per-row derived seeds; order-preserving.

    Row i behaves exactly like embed() called with seed derive_seed(seed, i),
    no matter how many workers run or how rows are batched.
    """
    cfg = (cfg or LatentFitConfig()).validate()
    gp = _pick_gp(model, modality)
    z_matrix = np.asarray(z_matrix, dtype=np.float64)
    if z_matrix.size == 0:
        return []
    if z_matrix.ndim != 2 or z_matrix.shape[1] != gp.out_dim:
        raise ShapeMismatch(
            f"{modality} embeddings must be (n, {gp.out_dim}), got {z_matrix.shape}"
        )
    rows = [_check_vector(gp, z_matrix[i], modality) for i in range(z_matrix.shape[0])]
    n_workers = _resolve_workers(workers, len(rows))

    if n_workers > 1:
        import multiprocessing

        try:
            ctx = multiprocessing.get_context("fork")
        except ValueError:
            ctx = None
        if ctx is not None:
            with ctx.Pool(n_workers, initializer=_pool_init,
                          initargs=(model, modality, cfg, with_noise)) as pool:
                return pool.map(_pool_row, list(enumerate(rows)))

    graph = GPGraph(gp)
    out = []
    for i, z in enumerate(rows):
        row_cfg = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, i))
        out.append(_embed_on_graph(graph, model, z, modality, row_cfg, with_noise))
    return out
