"""Shared-latent model over paired embeddings, and its training loop.

One latent point per image-text pair.  Two sparse GPs map the shared latent
space to the two embedding spaces, and training minimizes

    loss_total = lambda1 * loss_emb + lambda2 * loss_kl

where loss_emb is the negated sum of the two GP evidence lower bounds and
loss_kl is the batch mean of the symmetrized KL divergence between the two
GPs' diagonal predictive Gaussians at the batch's latent points.  All
parameters -- the latent matrix, both GPs' hyperparameters, inducing inputs
and variational posteriors -- are updated jointly by Adam.

Everything is deterministic given the seed: initialization draws come from
named child streams of one SeedSequence, and the per-epoch shuffle has its
own stream, so configuration changes never shift unrelated draws.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    DegenerateInput,
    EmptyDataset,
    NonFiniteLoss,
    NonFiniteValue,
    NotPositiveDefinite,
    ShapeMismatch,
)
from . import svgp
from .kernels import FAMILIES, KernelSpec, kernel_matrix
from .numerics import as_matrix, cholesky
from .svgp import GPGraph, SparseGP, gp_params


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    q_dim: int = 5
    m_inducing: int = 250
    lambda1: float = 0.01
    lambda2: float = 400.0
    kernel: str = "rbf"
    variational: str = "full"
    seed: int = 0
    lengthscale_init: float = 1.0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for key in ("batch_size", "q_dim", "m_inducing"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")
        for key in ("learning_rate", "adam_eps", "lengthscale_init"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be positive")
        for key in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ValueError(f"{key} must lie in [0, 1)")
        for key in ("lambda1", "lambda2"):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be >= 0")
        if self.kernel not in FAMILIES:
            raise ValueError(f"kernel must be one of {FAMILIES}, got {self.kernel!r}")
        if self.variational not in ("full", "diagonal"):
            raise ValueError(f"variational must be full or diagonal, got {self.variational!r}")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        return self

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse a flat key=value config; unlisted keys keep their defaults."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            try:
                if types[key] == "int":
                    values[key] = int(val)
                elif types[key] == "float":
                    values[key] = float(val)
                else:
                    values[key] = val
            except ValueError:
                raise ValueError(f"config line {lineno}: bad value for key {key!r}: {val!r}")
        try:
            return cls(**values).validate()
        except ValueError as exc:
            raise ValueError(f"config: {exc}")


# ---------------------------------------------------------------------------
# model containers


@dataclass
class LatentState:
    x: np.ndarray  # (N, Q)

    def __post_init__(self):
        self.x = as_matrix(self.x, "latent x")

    @property
    def n_pairs(self) -> int:
        return self.x.shape[0]

    @property
    def q_dim(self) -> int:
        return self.x.shape[1]


@dataclass
class PairedEmbeddings:
    """Row-aligned embedding matrices: row i of each modality is one pair."""

    image: np.ndarray  # (N, D_img)
    text: np.ndarray   # (N, D_txt)

    def __post_init__(self):
        self.image = as_matrix(self.image, "image embeddings")
        self.text = as_matrix(self.text, "text embeddings")
        if self.image.shape[0] != self.text.shape[0]:
            raise ShapeMismatch(
                f"modalities must pair row-for-row: image has {self.image.shape[0]} "
                f"rows, text has {self.text.shape[0]}"
            )

    @property
    def n_pairs(self) -> int:
        return self.image.shape[0]


@dataclass
class GroveModel:
    latent: LatentState
    gp_image: SparseGP
    gp_text: SparseGP
    lambda1: float
    lambda2: float
    rng_seed: int
    config: TrainConfig

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        q = self.latent.q_dim
        if self.gp_image.q_dim != q or self.gp_text.q_dim != q:
            raise ShapeMismatch(
                f"latent q_dim {q} does not match GPs "
                f"({self.gp_image.q_dim}, {self.gp_text.q_dim})"
            )

    def parameters(self) -> dict:
        """All trainable arrays keyed by their persistent tensor names."""
        out = {"latent_x": self.latent.x}
        for prefix, gp in (("img", self.gp_image), ("txt", self.gp_text)):
            for name, arr in gp_params(gp).items():
                out[f"{prefix}_{name}"] = arr
        return out


TENSOR_NAMES = (
    "latent_x",
    "img_inducing", "img_var_mean", "img_var_chol",
    "img_log_lengthscale", "img_log_noise", "img_mean_const",
    "txt_inducing", "txt_var_mean", "txt_var_chol",
    "txt_log_lengthscale", "txt_log_noise", "txt_mean_const",
)


def assemble_model(config: TrainConfig, tensors: dict) -> GroveModel:
    """Rebuild a model from its persistent tensors (checkpoint loading)."""
    config.validate()
    missing = [n for n in TENSOR_NAMES if n not in tensors]
    if missing:
        raise ShapeMismatch(f"missing tensors: {missing}")

    def build_gp(prefix: str) -> SparseGP:
        return SparseGP(
            kernel=KernelSpec(config.kernel,
                              tensors[f"{prefix}_log_lengthscale"],
                              np.float64(0.0)),
            mean_const=tensors[f"{prefix}_mean_const"],
            log_noise=tensors[f"{prefix}_log_noise"],
            inducing=tensors[f"{prefix}_inducing"],
            var_mean=tensors[f"{prefix}_var_mean"],
            var_chol=tensors[f"{prefix}_var_chol"],
            variational=config.variational,
        )

    return GroveModel(
        latent=LatentState(tensors["latent_x"]),
        gp_image=build_gp("img"),
        gp_text=build_gp("txt"),
        lambda1=config.lambda1,
        lambda2=config.lambda2,
        rng_seed=config.seed,
        config=config,
    )


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def create(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(np.asarray(p)) for k, p in params.items()},
            v={k: np.zeros_like(np.asarray(p)) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction.

    Parameters stored in log space simply receive their log-space gradient;
    no special casing is needed because everything is unconstrained.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.asarray(p).shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, "
                                f"parameter has {np.asarray(p).shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p[...] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# losses


def _check_batch(model: GroveModel, batch_indices) -> np.ndarray:
    idx = np.asarray(batch_indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("batch must be a nonempty 1-d index array")
    n = model.latent.n_pairs
    if np.any(idx < 0) or np.any(idx >= n):
        raise ValueError(f"batch indices must lie in [0, {n})")
    return idx


def _symmetric_kl_graph(graph_i: GPGraph, graph_t: GPGraph, xb: ad.Var, b: int) -> ad.Var:
    """Batch mean of 0.5 * [KL(I||T) + KL(T||I)] between diagonal predictives."""
    mean_i, var_i = graph_i.predict_parts(xb)
    mean_t, var_t = graph_t.predict_parts(xb)
    diff2 = (mean_i - mean_t).square()
    log_ratio = var_t.log() - var_i.log()
    kl_it = 0.5 * ((log_ratio + (var_i + diff2) / var_t - 1.0).sum(axis=1))
    kl_ti = 0.5 * (((var_t + diff2) / var_i - log_ratio - 1.0).sum(axis=1))
    return (0.5 * (kl_it + kl_ti)).sum() / float(b)


class _BatchLoss:
    """One minibatch's loss graph over fresh leaves for every parameter."""

    def __init__(self, model: GroveModel, idx: np.ndarray, data: PairedEmbeddings,
                 n_total: int):
        if data.image.shape[1] != model.gp_image.out_dim:
            raise ShapeMismatch(
                f"image embeddings have {data.image.shape[1]} dims, "
                f"the image GP expects {model.gp_image.out_dim}"
            )
        if data.text.shape[1] != model.gp_text.out_dim:
            raise ShapeMismatch(
                f"text embeddings have {data.text.shape[1]} dims, "
                f"the text GP expects {model.gp_text.out_dim}"
            )
        self.x_leaf = ad.leaf(model.latent.x)
        self.img_leaves = {k: ad.leaf(a) for k, a in gp_params(model.gp_image).items()}
        self.txt_leaves = {k: ad.leaf(a) for k, a in gp_params(model.gp_text).items()}
        xb = ad.take_rows(self.x_leaf, idx)
        graph_i = GPGraph(model.gp_image, self.img_leaves)
        graph_t = GPGraph(model.gp_text, self.txt_leaves)

        elbo_i = graph_i.elbo_graph(xb, data.image[idx], n_total)
        elbo_t = graph_t.elbo_graph(xb, data.text[idx], n_total)
        self.emb = -(elbo_i + elbo_t)

        if model.lambda2 > 0:
            if model.gp_image.out_dim != model.gp_text.out_dim:
                raise ShapeMismatch(
                    "the cross-modal term needs equal embedding dimensions, got "
                    f"{model.gp_image.out_dim} and {model.gp_text.out_dim}"
                )
            self.kl = _symmetric_kl_graph(graph_i, graph_t, xb, idx.size)
            self.total = model.lambda1 * self.emb + model.lambda2 * self.kl
        else:
            # Keep the KL subgraph out of the tape entirely so the image GP's
            # gradients cannot pick up even a signed zero from the text side.
            self.kl = None
            self.total = model.lambda1 * self.emb

    def gradients(self) -> dict:
        wrt = [self.x_leaf]
        names = ["latent_x"]
        for prefix, leaves in (("img", self.img_leaves), ("txt", self.txt_leaves)):
            for key, var in leaves.items():
                wrt.append(var)
                names.append(f"{prefix}_{key}")
        return dict(zip(names, ad.backward(self.total, wrt)))


def loss_emb(model: GroveModel, batch_indices, image_z, text_z) -> float:
    """Negated sum of the two GP evidence lower bounds for one batch."""
    idx = _check_batch(model, batch_indices)
    data = PairedEmbeddings(image_z, text_z)
    if data.n_pairs != model.latent.n_pairs:
        raise ShapeMismatch("embedding rows must match the latent row count")
    return float(_BatchLoss(model, idx, data, model.latent.n_pairs).emb.value)


def loss_kl(model: GroveModel, batch_indices) -> float:
    """Batch mean of the symmetrized KL between the two GPs' predictives."""
    idx = _check_batch(model, batch_indices)
    if model.gp_image.out_dim != model.gp_text.out_dim:
        raise ShapeMismatch(
            "the cross-modal term needs equal embedding dimensions, got "
            f"{model.gp_image.out_dim} and {model.gp_text.out_dim}"
        )
    xb = ad.const(model.latent.x[idx])
    graph_i = GPGraph(model.gp_image)
    graph_t = GPGraph(model.gp_text)
    return float(_symmetric_kl_graph(graph_i, graph_t, xb, idx.size).value)


def loss_total(model: GroveModel, batch_indices, data: PairedEmbeddings):
    """Weighted training loss and its gradients for one batch.

    Returns (value, grads) with grads keyed like GroveModel.parameters().
    """
    idx = _check_batch(model, batch_indices)
    if data.n_pairs != model.latent.n_pairs:
        raise ShapeMismatch("embedding rows must match the latent row count")
    built = _BatchLoss(model, idx, data, model.latent.n_pairs)
    return float(built.total.value), built.gradients()


# ---------------------------------------------------------------------------
# training


@dataclass
class TraceRow:
    epoch: int
    loss_total: float
    loss_emb: float
    loss_kl: float


def trace_to_csv(trace: list) -> str:
    lines = ["epoch,loss_total,loss_emb,loss_kl"]
    for row in trace:
        lines.append(f"{row.epoch},{row.loss_total!r},{row.loss_emb!r},{row.loss_kl!r}")
    return "\n".join(lines) + "\n"


def _streams(seed: int) -> list:
    """Four decoupled generators: latent init, image GP, text GP, shuffling."""
    return [np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(4)]


def _init_gp(x: np.ndarray, z: np.ndarray, config: TrainConfig,
             rng: np.random.Generator) -> SparseGP:
    n = x.shape[0]
    m_eff = min(config.m_inducing, n)
    rows = rng.choice(n, size=m_eff, replace=False)
    mean_const = float(z.mean())
    noise0 = max(0.1 * float(z.var()), 1e-6)
    gp = SparseGP.create(
        KernelSpec.create(config.kernel, lengthscale=config.lengthscale_init),
        q_dim=config.q_dim,
        out_dim=z.shape[1],
        m_inducing=m_eff,
        variational=config.variational,
        mean_const=mean_const,
        noise_variance=noise0,
        inducing=x[rows],
    )
    # Start the variational posterior at the prior: the inducing KL is zero
    # and the predictive equals the prior, so the first gradients are driven
    # purely by the data term.
    gp.var_mean[...] = mean_const
    if config.variational == "full":
        kvv = kernel_matrix(gp.kernel, gp.inducing, gp.inducing)
        low = cholesky(kvv, svgp.PRIOR_NUGGET).lower
        raw = np.tril(low, -1)
        np.fill_diagonal(raw, np.log(np.diag(low)))
        gp.var_chol[...] = raw[None]
    # diagonal mode: raw zeros already mean unit variances == the prior diagonal
    return gp


def init_model(data: PairedEmbeddings, config: TrainConfig) -> GroveModel:
    """Seeded initialization: latent draw, inducing subsets, moment-matched GPs."""
    config.validate()
    n = data.n_pairs
    if n == 0:
        raise EmptyDataset("no pairs to train on")
    if n < 2:
        raise DegenerateInput("training needs at least 2 pairs")
    d_min = min(data.image.shape[1], data.text.shape[1])
    if config.q_dim >= d_min:
        raise DegenerateInput(
            f"q_dim ({config.q_dim}) must be smaller than the embedding "
            f"dimension ({d_min})"
        )
    if config.lambda2 > 0 and data.image.shape[1] != data.text.shape[1]:
        raise ShapeMismatch(
            "lambda2 > 0 couples the modalities, which requires equal embedding "
            f"dimensions; got {data.image.shape[1]} and {data.text.shape[1]}"
        )
    rng_latent, rng_img, rng_txt, _ = _streams(config.seed)
    x = 0.1 * rng_latent.standard_normal((n, config.q_dim))
    return GroveModel(
        latent=LatentState(x),
        gp_image=_init_gp(x, data.image, config, rng_img),
        gp_text=_init_gp(x, data.text, config, rng_txt),
        lambda1=config.lambda1,
        lambda2=config.lambda2,
        rng_seed=config.seed,
        config=config,
    )


def train(data: PairedEmbeddings, config: TrainConfig):
    """Fit the model; returns (model, trace) with one trace row per epoch.

    Each trace entry is the mean over that epoch's minibatches.  A non-finite
    batch loss aborts immediately rather than being skipped: it always means
    the optimization left the numerically sane region and later numbers would
    be garbage anyway.
    """
    model = init_model(data, config)
    n = data.n_pairs
    params = model.parameters()
    state = AdamState.create(params)
    rng_shuffle = _streams(config.seed)[3]
    kl_defined = model.gp_image.out_dim == model.gp_text.out_dim

    trace = []
    for epoch in range(1, config.epochs + 1):
        perm = rng_shuffle.permutation(n)
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            try:
                built = _BatchLoss(model, idx, data, n)
                total = float(built.total.value)
                emb = float(built.emb.value)
                if built.kl is not None:
                    kl = float(built.kl.value)
                elif kl_defined:
                    kl = loss_kl(model, idx)
                else:
                    kl = math.nan
            except (NonFiniteValue, NotPositiveDefinite) as exc:
                raise NonFiniteLoss(f"optimization diverged: {exc}",
                                    epoch=epoch, batch=n_batches) from exc
            if not (math.isfinite(total) and math.isfinite(emb)):
                raise NonFiniteLoss(
                    f"loss became non-finite (total={total}, emb={emb})",
                    epoch=epoch, batch=n_batches,
                )
            adam_step(params, built.gradients(), state, config.learning_rate,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            sums += (total, emb, kl)
            n_batches += 1
        means = sums / n_batches
        trace.append(TraceRow(epoch, float(means[0]), float(means[1]),
                              float(means[2])))
    return model, trace
