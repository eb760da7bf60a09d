"""Export frozen vision-language embeddings to the grove file formats."""

from .extract import ExtractJob, MissingImage, ModelLoadFailure, extract, validate

__all__ = ["ExtractJob", "MissingImage", "ModelLoadFailure", "extract", "validate"]
