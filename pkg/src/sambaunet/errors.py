"""Exception hierarchy shared by every subsystem."""


class SambaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SambaError, ValueError):
    """Tensor shapes or extents are incompatible."""


class ConfigurationError(SambaError, ValueError):
    """A configuration record or geometry is invalid."""


class ContractError(SambaError, ValueError):
    """A precondition on an argument value is violated."""


class NumericError(SambaError, ArithmeticError):
    """Non-finite values were detected."""


class FormatError(SambaError, ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
