"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, shape mismatch or out-of-range hyperparameter."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value or hit a degenerate case."""

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class UsageError(RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed or failed validation."""

    def __init__(self, message, record=None):
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)
        self.record = record
