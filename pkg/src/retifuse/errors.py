"""Exception types raised across the package."""


class RetifuseError(Exception):
    """Base class for all package errors."""


class DimensionError(RetifuseError, ValueError):
    """Array shapes do not line up with what an operation expects."""


class ConfigError(RetifuseError, ValueError):
    """A configuration value is invalid (non-positive weight, even kernel, ...)."""


class DegenerateBatchError(RetifuseError, ValueError):
    """Batch statistics cannot be computed (e.g. batch norm on one sample)."""


class NumericalError(RetifuseError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class EmptyDatasetError(RetifuseError, ValueError):
    """Nothing is left to work with after cleaning or filtering."""


class InsufficientDataError(RetifuseError, ValueError):
    """Too few samples (overall or in some class) for the requested operation."""


class FormatError(RetifuseError, ValueError):
    """A binary or text file does not follow its expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnknownIdError(RetifuseError, KeyError):
    """A sample id was requested that the source does not contain."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown id"
