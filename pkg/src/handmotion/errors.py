"""Exception types shared across the package."""


class HandMotionError(Exception):
    """Base class for all package-specific errors."""


class DegenerateInput(HandMotionError, ValueError):
    """Geometric input too degenerate to process (collinear points, zero-norm 6D blocks, ...)."""


class AmbiguousRotation(HandMotionError, ValueError):
    """Rotation angle at pi: the axis is ill-defined and interpolation is ambiguous."""


class ShapeMismatch(HandMotionError, ValueError):
    """Array arguments disagree on shape where the contract requires equality."""


class DimensionMismatch(HandMotionError, ValueError):
    """Feature/parameter dimensions are incompatible."""


class ZeroVector(HandMotionError, ValueError):
    """A vector that must be normalizable has (near-)zero norm."""


class SeparationFailure(HandMotionError, RuntimeError):
    """Rejection sampling could not produce sufficiently separated embeddings."""


class ConfigInvalid(HandMotionError, ValueError):
    """A configuration object violates its invariants."""


class DataEmpty(HandMotionError, ValueError):
    """A dataset or batch source yields no usable items."""


class NonFiniteLoss(HandMotionError, RuntimeError):
    """Training loss became NaN/inf; aborted with diagnostics."""


class ClipMisaligned(HandMotionError, ValueError):
    """Sequence length is incompatible with the clip grid and padding is disabled."""


class SequenceTooShort(HandMotionError, ValueError):
    """Sequence has too few frames/clips for the requested operation."""


class SplitLeak(HandMotionError, RuntimeError):
    """An evaluation record id also appears in the training manifest."""


class ParseError(HandMotionError, ValueError):
    """A dataset file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(HandMotionError, ValueError):
    """A dataset record violates the documented schema; carries the field name."""

    def __init__(self, field: str, message: str = ""):
        super().__init__(f"{field}: {message}" if message else field)
        self.field = field


class CovarianceIllConditioned(HandMotionError, RuntimeError):
    """Covariance estimate unusable even after shrinkage."""
