"""Coarse-to-fine few-shot class-incremental learning on a desk-scale synthetic lab."""

from .errors import (
    ConfigError,
    EmptyError,
    FormatError,
    GenError,
    KnoweError,
    LabelError,
    NumericError,
    ShapeError,
    UndefinedMetric,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EmptyError",
    "FormatError",
    "GenError",
    "KnoweError",
    "LabelError",
    "NumericError",
    "ShapeError",
    "UndefinedMetric",
    "__version__",
]
