"""Exception types raised across the package."""


class DFormerError(Exception):
    """Base class for all package errors."""


class DimensionError(DFormerError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ConfigurationError(DFormerError, ValueError):
    """An architectural or run configuration violates an invariant."""


class ParameterError(DFormerError, ValueError):
    """A scalar or structural argument is out of its valid range."""


class ContractError(DFormerError, RuntimeError):
    """A call was made outside an operation's contract."""


class NumericError(DFormerError, ArithmeticError):
    """A forward value or oracle evaluation became non-finite."""


class FormatError(DFormerError, ValueError):
    """An on-disk file is malformed.

    ``offset`` is the byte offset at which the problem was detected, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
