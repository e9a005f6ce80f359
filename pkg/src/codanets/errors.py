"""Exception types shared across the package."""


class CodaError(Exception):
    """Base class for all package errors."""


class DimensionError(CodaError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CodaError, ValueError):
    """A precondition of an operation was violated."""


class ConfigurationError(CodaError, ValueError):
    """An invalid configuration value (stride, kernel, precision, ...)."""


class ParseError(CodaError, ValueError):
    """A binary file did not match its declared format.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(CodaError, RuntimeError):
    """Training diverged (non-finite loss)."""
