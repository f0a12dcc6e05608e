"""Exception hierarchy. Each class maps to one CLI exit code."""


class BSSADError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(BSSADError, ValueError):
    """Invalid configuration or usage."""

    exit_code = 2


class PreconditionError(BSSADError, ValueError):
    """Input violates an operation precondition (e.g. anomalies in training data)."""

    exit_code = 2


class DataError(BSSADError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class ModelFormatError(DataError):
    """Model file is corrupt, truncated, or of the wrong version."""


class NumericalError(BSSADError, ArithmeticError):
    """Non-finite loss, singular covariance, and similar numerical failures."""

    exit_code = 4
