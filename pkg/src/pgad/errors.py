"""Exception types shared across the package."""


class PgadError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PgadError, ValueError):
    """A configuration value violates its documented constraints."""


class InfeasibleSplitError(ConfigError):
    """A requested cross-validation split cannot be satisfied."""


class RangeError(PgadError, ValueError):
    """A numeric argument lies outside its documented range."""


class LabelError(PgadError, ValueError):
    """A class label is outside the valid range."""


class EmptyBatchError(PgadError, ValueError):
    """An operation that needs at least one sample received none."""


class ShapeError(PgadError, ValueError):
    """Array dimensions do not match the documented contract."""


class DegenerateInputError(PgadError, ValueError):
    """Input is degenerate for the requested operation, e.g. a zero vector under cosine."""


class ProtocolError(PgadError, RuntimeError):
    """Caller violated an interaction contract between components."""


class DonorExhaustionError(ProtocolError):
    """No same-class donor is available to build a pseudo-pair."""


class UsageError(PgadError, RuntimeError):
    """API misuse, e.g. backward without a prior forward."""


class NumericHealthError(PgadError, ArithmeticError):
    """A loss term or gradient became NaN or infinite."""


class MetricUndefinedError(PgadError, ValueError):
    """A metric is undefined for the given inputs, e.g. AUC with a single class."""
