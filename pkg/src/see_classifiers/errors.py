"""Exception types shared across the package."""


class SeeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SeeError, ValueError):
    """Invalid configuration, shapes, or hyperparameters."""


class ShapeError(ConfigurationError):
    """A derived or supplied array shape is inconsistent."""


class UsageError(SeeError, RuntimeError):
    """An API was called in an invalid state or with invalid arguments."""


class TrainingError(SeeError, RuntimeError):
    """Training produced non-finite values."""


class DataError(SeeError, ValueError):
    """Input data is malformed or exhausted."""


class ParseError(DataError):
    """A data file failed validation; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
