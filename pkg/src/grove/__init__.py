"""Probabilistic embeddings for frozen encoder pairs.

A shared low-dimensional latent space is fit post hoc over paired image/text
embeddings with two sparse Gaussian processes; new embeddings map to latent
posteriors whose predictive variance is the uncertainty signal.
"""

from .errors import (BadHeader, BadMagic, BadSplitLabel, BadVersion,
                     DegenerateInput, EmptyDataset, EmptyGallery, GroveError,
                     InconsistentGroup, IndexOutOfRange, KTooLarge,
                     NonFiniteLoss, NonFiniteValue, NotPositiveDefinite,
                     ShapeMismatch, TruncatedPayload, UnsupportedDtype)
from .gplvm import GroveModel, PairedEmbeddings, TraceRow, TrainConfig, train
from .inference import (LatentFitConfig, ProbabilisticEmbedding, batch_embed,
                        derive_seed, embed, infer_latent)
from .kernels import KernelSpec
from .metrics import (CalibrationReport, DiagGaussian, calibration_report,
                      confidence_from_uncertainty, ece, first_correct_ranks,
                      js_diag, kl_diag, r_squared, recall_at_1,
                      retrieval_hits, select_uncertain, spearman,
                      wasserstein2_diag)
from .synthetic import SyntheticPairs, corrupt, make_pairs

__all__ = [
    "BadHeader", "BadMagic", "BadSplitLabel", "BadVersion", "CalibrationReport",
    "DegenerateInput", "DiagGaussian", "EmptyDataset", "EmptyGallery",
    "GroveError", "GroveModel", "InconsistentGroup", "IndexOutOfRange",
    "KTooLarge", "KernelSpec", "LatentFitConfig", "NonFiniteLoss",
    "NonFiniteValue", "NotPositiveDefinite", "PairedEmbeddings",
    "ProbabilisticEmbedding", "ShapeMismatch", "SyntheticPairs", "TraceRow",
    "TrainConfig", "TruncatedPayload", "UnsupportedDtype", "batch_embed",
    "calibration_report", "confidence_from_uncertainty", "corrupt",
    "derive_seed", "ece", "embed", "first_correct_ranks", "infer_latent",
    "js_diag", "kl_diag", "make_pairs", "r_squared", "recall_at_1",
    "retrieval_hits", "select_uncertain", "spearman", "train",
    "wasserstein2_diag",
]
