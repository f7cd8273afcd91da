"""Exception types shared across the package."""


class InvarcoError(Exception):
    """Base class for all package errors."""


class InvalidInputError(InvarcoError):
    """An argument violates a documented precondition."""


class DegenerateSceneError(InvarcoError):
    """Camera geometry carries no usable scale (all positions coincide)."""


class BehindCameraError(InvarcoError):
    """A point required for projection lies at or behind the camera."""


class InvalidActionError(InvarcoError):
    """Action vector contains non-finite components."""


class GenerationFailedError(InvarcoError):
    """Dataset generation aborted (e.g. scripted expert failing too often)."""


class EmptySourceError(InvarcoError):
    """A batch term was requested from a dataset that cannot supply it."""


class CrossKindError(InvarcoError):
    """Pair classification across demo and static datasets is undefined."""


class DatasetVersionError(InvarcoError):
    """Manifest version is not understood by this build."""


class CorruptBlobError(InvarcoError):
    """An observation blob failed header or length validation."""


class MissingBlobError(InvarcoError):
    """Manifest references a blob that is not on disk."""


class NumericFailureError(InvarcoError):
    """A loss or gradient became non-finite; carries the offending term."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class ResumeError(InvarcoError):
    """Checkpoint cannot be resumed (corruption or config mismatch)."""


class ShapeMismatchError(InvarcoError):
    """Tensor or image shape differs from the configured one."""
