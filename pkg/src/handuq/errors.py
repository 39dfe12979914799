"""Exception types shared across the package."""


class HanduqError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(HanduqError):
    """An input vector or matrix has the wrong dimensions."""


class NonInvertiblePrecision(HanduqError):
    """A precision factor A yields a singular A @ A.T."""


class NotPositiveDefinite(HanduqError):
    """A covariance (or precision) matrix is not positive definite."""


class EmptyBatch(HanduqError):
    """An operation that needs at least one sample received none."""


class KinematicsError(HanduqError):
    """Joint angles violate the skeleton's limits."""


class EmptyInput(HanduqError):
    """A metric that needs at least one entry received none."""


class DegenerateConfiguration(HanduqError):
    """A point set is degenerate (e.g. all points coincide)."""


class InsufficientData(HanduqError):
    """Too few entries to build a sparsification curve."""


class UndefinedCorrelation(HanduqError):
    """Correlation is undefined (zero variance or fewer than 2 entries)."""


class TrainingDiverged(HanduqError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"loss became non-finite at iteration {iteration}")


class IncompatibleCheckpoint(HanduqError):
    """A checkpoint does not match the data or requested configuration."""


class ParseError(HanduqError):
    """A data file is malformed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
