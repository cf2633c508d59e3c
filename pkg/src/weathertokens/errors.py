"""Exception types shared across the pipeline.

Each family maps onto a CLI exit code: configuration/usage problems (1),
data or file-format problems (2) and numerical aborts (3).
"""


class ConfigError(ValueError):
    """Invalid model, pipeline or command configuration."""


class DataError(ValueError):
    """Input data violates its contract."""


class FormatError(DataError):
    """A file does not carry the expected magic bytes or version."""


class CorruptionError(DataError):
    """A file header is inconsistent with its payload."""


class FingerprintError(DataError):
    """A checkpoint does not match the configuration it is used with."""


class DegenerateError(DataError):
    """A statistic is undefined for the given data (zero variance, empty range, ...)."""


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""
