"""Exception types shared across the package."""


class DualSyncError(Exception):
    """Base class for all package errors."""


class ConfigError(DualSyncError, ValueError):
    """Invalid configuration value or plan."""


class ContractError(DualSyncError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(DualSyncError, ValueError):
    """Operand shapes are incompatible."""


class NumericalError(DualSyncError, ArithmeticError):
    """A computation produced NaN or Inf."""


class FormatError(DualSyncError, ValueError):
    """A binary file is malformed.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
