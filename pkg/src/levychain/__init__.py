"""Numerical laboratory for degenerate chains driven by stable-like Levy noise."""

from .errors import ConfigurationError, DivergenceError, LevyChainError, NumericalError, QSupViolation

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DivergenceError",
    "LevyChainError",
    "NumericalError",
    "QSupViolation",
]
