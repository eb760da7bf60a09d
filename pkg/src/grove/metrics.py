"""Retrieval and calibration evaluation for probabilistic embeddings.

Distances between diagonal Gaussians (W2, KL, moment-matched JS), Recall@1
retrieval with deterministic tie-breaking, rank/regression statistics over
uncertainty bins, confidence/ECE, and top-k uncertainty selection.

Conventions that matter for reproducibility:
  - every ranking tie is broken by the lower index;
  - calibration bins are equal-count (quantile) over uncertainty;
  - ECE bins are equal-width over confidence in [0, 1];
  - spearman/r_squared return (value, degenerate) where degenerate marks the
    flagged-zero convention for constant inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateInput, EmptyGallery, IndexOutOfRange,
                     KTooLarge, ShapeMismatch)

DISTANCES = ("w2", "kl", "cosine")


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        variance = np.asarray(self.variance, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)
        if mean.shape != variance.shape:
            raise ShapeMismatch(
                f"mean and variance lengths differ: {mean.shape[0]} vs {variance.shape[0]}"
            )
        if mean.size == 0:
            raise ShapeMismatch("gaussian must have at least one dimension")
        if not np.all(variance > 0):
            raise ValueError("variance must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _pair_dims(p: DiagGaussian, q: DiagGaussian) -> None:
    if p.dim != q.dim:
        raise ShapeMismatch(f"dimension mismatch: {p.dim} vs {q.dim}")


def wasserstein2_diag(p: DiagGaussian, q: DiagGaussian) -> float:
    """Squared 2-Wasserstein distance between diagonal Gaussians."""
    _pair_dims(p, q)
    dm = p.mean - q.mean
    ds = np.sqrt(p.variance) - np.sqrt(q.variance)
    return float(dm @ dm + ds @ ds)


def kl_diag(p: DiagGaussian, q: DiagGaussian) -> float:
    """KL(p || q) for diagonal Gaussians, in nats."""
    _pair_dims(p, q)
    dm = p.mean - q.mean
    terms = (np.log(q.variance) - np.log(p.variance)
             + (p.variance + dm * dm) / q.variance - 1.0)
    return float(0.5 * terms.sum())


def js_diag(p: DiagGaussian, q: DiagGaussian) -> float:
    """Jensen-Shannon divergence with the mixture midpoint replaced by its
    moment-matched diagonal Gaussian (the Gaussian mixture itself has no
    closed-form KL)."""
    _pair_dims(p, q)
    dm = p.mean - q.mean
    m = DiagGaussian(
        mean=0.5 * (p.mean + q.mean),
        variance=0.5 * (p.variance + q.variance) + 0.25 * dm * dm,
    )
    return 0.5 * (kl_diag(p, m) + kl_diag(q, m))


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 1.0
    return 1.0 - float(a @ b) / denom


def _distance(p: DiagGaussian, q: DiagGaussian, kind: str) -> float:
    if kind == "w2":
        return wasserstein2_diag(p, q)
    if kind == "kl":
        return kl_diag(p, q)
    if kind == "cosine":
        return _cosine_distance(p.mean, q.mean)
    raise ValueError(f"distance must be one of {DISTANCES}, got {kind!r}")


def first_correct_ranks(queries, gallery, ground_truth, distance: str = "w2") -> np.ndarray:
    """1-based rank of the best-placed correct gallery item per query.

    ground_truth[i] is a collection of acceptable gallery indices for query i
    (several captions may describe one image).  Gallery items are ranked by
    increasing distance, ties broken by the lower index.  A query with an
    empty ground-truth set gets rank 0 (no correct item exists).
    """
    if distance not in DISTANCES:
        raise ValueError(f"distance must be one of {DISTANCES}, got {distance!r}")
    gallery = list(gallery)
    queries = list(queries)
    if not gallery:
        raise EmptyGallery("gallery is empty")
    if len(ground_truth) != len(queries):
        raise ShapeMismatch(
            f"{len(queries)} queries but {len(ground_truth)} ground-truth sets"
        )
    truth_sets = []
    for i, indices in enumerate(ground_truth):
        s = set(int(j) for j in indices)
        for j in s:
            if not 0 <= j < len(gallery):
                raise IndexOutOfRange(
                    f"ground truth for query {i} references gallery index {j}"
                )
        truth_sets.append(s)

    ranks = np.zeros(len(queries), dtype=np.int64)
    for i, (q, truth) in enumerate(zip(queries, truth_sets)):
        if not truth:
            continue
        dists = [_distance(q, g, distance) for g in gallery]
        order = sorted(range(len(gallery)), key=lambda j: (dists[j], j))
        for pos, j in enumerate(order, start=1):
            if j in truth:
                ranks[i] = pos
                break
    return ranks


def retrieval_hits(queries, gallery, ground_truth, distance: str = "w2") -> np.ndarray:
    """Per-query 0/1 hit vector: 1 when the nearest gallery item is correct."""
    ranks = first_correct_ranks(queries, gallery, ground_truth, distance)
    return (ranks == 1).astype(np.float64)


def recall_at_1(queries, gallery, ground_truth, distance: str = "w2") -> float:
    """Fraction of queries whose nearest gallery item is in their truth set."""
    hits = retrieval_hits(queries, gallery, ground_truth, distance)
    if hits.size == 0:
        return 0.0
    return float(hits.mean())


def _fractional_ranks(v: np.ndarray) -> np.ndarray:
    """Average ranks for ties, 1-based."""
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def spearman(a, b):
    """Rank correlation; returns (value, degenerate).

    degenerate=True flags the convention value 0.0 used when either input
    is constant (correlation undefined).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeMismatch(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise DegenerateInput("need at least 2 points for rank correlation")
    if np.all(a == a[0]) or np.all(b == b[0]):
        return 0.0, True
    ra = _fractional_ranks(a)
    rb = _fractional_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    value = float((ra @ rb) / math.sqrt((ra @ ra) * (rb @ rb)))
    return min(1.0, max(-1.0, value)), False


def r_squared(x, y):
    """R^2 of the OLS line y ~ x; returns (value, degenerate).

    Constant x makes the slope undefined: flagged (0.0, True).  Constant y
    is the convention value (0.0, False).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeMismatch(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DegenerateInput("need at least 2 points for regression")
    if np.all(x == x[0]):
        return 0.0, True
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 0.0, False
    xc = x - x.mean()
    slope = float((xc @ (y - y.mean())) / (xc @ xc))
    resid = y - (y.mean() + slope * xc)
    value = 1.0 - float((resid @ resid)) / ss_tot
    return value, False


@dataclass(frozen=True)
class CalibrationReport:
    bins: list            # (mean_uncertainty, recall_at_1, count) per bin
    spearman: float
    r_squared: float
    neg_sr2: float

    def to_json(self) -> str:
        return json.dumps({
            "bins": [{"mean_uncertainty": u, "recall_at_1": r, "count": c}
                     for u, r, c in self.bins],
            "spearman": self.spearman,
            "r_squared": self.r_squared,
            "neg_sr2": self.neg_sr2,
        })

    def to_csv(self) -> str:
        # The summary row reuses the three value columns for S, R^2, -S*R^2.
        lines = ["bin,mean_uncertainty,recall_at_1,count"]
        for i, (u, r, c) in enumerate(self.bins):
            lines.append(f"{i},{u!r},{r!r},{c}")
        lines.append(f"summary,{self.spearman!r},{self.r_squared!r},{self.neg_sr2!r}")
        return "\n".join(lines) + "\n"


def calibration_report(uncertainties, hits, n_bins: int = 10) -> CalibrationReport:
    """Quantile-binned uncertainty-vs-recall curve with S, R^2, -S*R^2."""
    u = np.asarray(uncertainties, dtype=np.float64).reshape(-1)
    h = np.asarray(hits, dtype=np.float64).reshape(-1)
    if u.shape != h.shape:
        raise ShapeMismatch(f"length mismatch: {u.shape[0]} vs {h.shape[0]}")
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if u.shape[0] < n_bins:
        raise DegenerateInput(f"{u.shape[0]} queries cannot fill {n_bins} bins")
    order = np.argsort(u, kind="stable")
    bins = []
    for chunk in np.array_split(order, n_bins):
        bins.append((float(u[chunk].mean()), float(h[chunk].mean()), int(len(chunk))))
    bin_u = [b[0] for b in bins]
    bin_r = [b[1] for b in bins]
    s, _ = spearman(bin_u, bin_r)
    r2, _ = r_squared(bin_u, bin_r)
    return CalibrationReport(bins=bins, spearman=s, r_squared=r2, neg_sr2=-s * r2)


def confidence_from_uncertainty(u) -> np.ndarray:
    """conf(a) = 1 - softmax(u)(a) over a candidate set."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.size == 0:
        raise DegenerateInput("empty candidate set")
    shifted = u - u.max()
    e = np.exp(shifted)
    return 1.0 - e / e.sum()


def ece(confidences, accuracies, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width confidence bins."""
    c = np.asarray(confidences, dtype=np.float64).reshape(-1)
    a = np.asarray(accuracies, dtype=np.float64).reshape(-1)
    if c.shape != a.shape:
        raise ShapeMismatch(f"length mismatch: {c.shape[0]} vs {a.shape[0]}")
    if c.size == 0:
        raise DegenerateInput("empty input")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if np.any((c < 0) | (c > 1)) or np.any((a < 0) | (a > 1)):
        raise ValueError("confidences and accuracies must lie in [0, 1]")
    idx = np.minimum((c * n_bins).astype(np.int64), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            continue
        total += (count / c.size) * abs(float(c[mask].mean()) - float(a[mask].mean()))
    return total


def select_uncertain(uncertainties, k: int) -> list:
    """Indices of the k largest uncertainties, descending, ties by lower index."""
    u = np.asarray(uncertainties, dtype=np.float64).reshape(-1)
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > u.shape[0]:
        raise KTooLarge(f"k={k} exceeds {u.shape[0]} samples")
    order = np.lexsort((np.arange(u.shape[0]), -u))
    return [int(i) for i in order[:k]]
