"""Exception types raised across the package."""


class SkeiError(Exception):
    """Base class for all package errors."""


class ConfigError(SkeiError, ValueError):
    """Invalid configuration or parameter combination."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)


class ShapeError(SkeiError, ValueError):
    """Array shapes are inconsistent with the operator."""


class DataError(SkeiError, ValueError):
    """Input data is non-finite or otherwise unusable."""


class NumericError(SkeiError, ArithmeticError):
    """A numerical precondition was violated (e.g. non-positive scale)."""


class ConvergenceError(SkeiError, RuntimeError):
    """An iterative method ran out of iterations."""

    def __init__(self, message: str, last_iterate=None, last_estimate=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.last_estimate = last_estimate


class IngestError(SkeiError, IOError):
    """A data file could not be read or has an unexpected layout."""


class LoadError(SkeiError, IOError):
    """A checkpoint does not match the requested architecture."""


class ReportError(SkeiError, IOError):
    """A run directory is incomplete."""
