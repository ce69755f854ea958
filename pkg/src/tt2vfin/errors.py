"""Exception hierarchy shared across the package."""


class TT2VFinError(Exception):
    """Base class for all package errors."""


class UsageError(TT2VFinError, ValueError):
    """Invalid argument or precondition violated by the caller."""


class DimensionError(UsageError):
    """Array shapes are incompatible for the requested operation."""


class NumericError(TT2VFinError, ArithmeticError):
    """NaN, non-finite or out-of-domain numeric input."""


class IngestionError(TT2VFinError):
    """A price file could not be parsed; carries row and field when known."""

    def __init__(self, message, row=None, field=None):
        self.row = row
        self.field = field
        where = []
        if row is not None:
            where.append(f"row {row}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class AggregationError(NumericError):
    """GMNN found a time point with no valid value."""


class TrainingError(TT2VFinError):
    """Optimisation diverged or produced non-finite values."""


class ConfigError(TT2VFinError):
    """Run configuration is invalid or inconsistent."""


class CheckpointError(TT2VFinError):
    """Checkpoint file is truncated, corrupt, or mismatched."""
