"""Exception types shared across the package."""


class McfuseError(Exception):
    """Base class for all package errors."""


class DimensionError(McfuseError, ValueError):
    """Tensor or signal shapes are inconsistent with an operation's contract."""


class ConfigError(McfuseError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class VocabularyError(McfuseError, ValueError):
    """A token id falls outside the model vocabulary."""


class DataError(McfuseError, ValueError):
    """An input signal or file does not satisfy the documented preconditions."""


class NumericsError(McfuseError, FloatingPointError):
    """A forward or backward pass produced non-finite values."""


class MetricError(McfuseError, ValueError):
    """A metric is undefined for the given inputs (e.g. WER with empty reference)."""
