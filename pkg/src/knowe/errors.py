"""Exception hierarchy shared by every module."""


class KnoweError(Exception):
    pass


class NumericError(KnoweError):
    """A non-finite value or a degenerate direction (zero-norm vector)."""


class ConfigError(KnoweError, ValueError):
    pass


class GenError(KnoweError):
    """Synthetic data generation could not satisfy the requested geometry."""


class FormatError(KnoweError, ValueError):
    pass


class EmptyError(FormatError):
    pass


class ShapeError(KnoweError, ValueError):
    pass


class LabelError(KnoweError, ValueError):
    pass


class UndefinedMetric(KnoweError, ArithmeticError):
    """A metric whose denominator is zero. Callers report it instead of crashing."""
