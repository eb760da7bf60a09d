"""Exception taxonomy shared across the package.

Three broad families matter to callers: usage problems (bad arguments or
config), data problems (malformed files, inconsistent manifests), and
numerical failures (non-finite losses, factorization breakdowns).  The CLI
maps these onto its exit codes; library callers can catch ``GroveError``.
"""


class GroveError(Exception):
    """Base class for all package-specific errors."""


# --- numerical ---------------------------------------------------------------

class ShapeMismatch(GroveError):
    """Operands have incompatible shapes."""


class NotPositiveDefinite(GroveError):
    """A matrix required to be positive definite is not, even after the
    jitter ladder has been exhausted."""


class NonFiniteValue(GroveError):
    """A NaN or infinity appeared where a finite value is required."""


class NonFiniteLoss(GroveError):
    """Training produced a non-finite loss; carries the offending location."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


# --- data --------------------------------------------------------------------

class EmptyDataset(GroveError):
    """A dataset with too few pairs to train on."""


class EmptyGallery(GroveError):
    """Retrieval against an empty gallery."""


class DegenerateInput(GroveError):
    """An input that makes a statistic undefined (e.g. a constant vector)."""


class KTooLarge(GroveError):
    """Asked to select more items than the pool holds."""


class BadMagic(GroveError):
    """An embedding file that does not start with the expected magic bytes."""


class BadVersion(GroveError):
    """An embedding file with an unsupported format version."""


class UnsupportedDtype(GroveError):
    """An embedding file with a dtype code this reader does not handle."""


class TruncatedPayload(GroveError):
    """A binary file shorter than its header promises."""


class BadHeader(GroveError):
    """A checkpoint header that is malformed or missing required tensors."""


class IndexOutOfRange(GroveError):
    """A manifest row referencing a row outside its embedding file."""


class InconsistentGroup(GroveError):
    """Manifest records of one group disagree on their image row."""


class BadSplitLabel(GroveError):
    """A manifest split label outside train/val/test."""
