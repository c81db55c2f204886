"""Semantic exception hierarchy.

Library code never raises bare ValueError for contract violations; every
failure mode a caller may want to catch has its own class.
"""

from __future__ import annotations


class EntropicBespokeError(Exception):
    """Base class for all library errors."""


class ConfigurationError(EntropicBespokeError, ValueError):
    """Inputs violate a contract: bad parameter domain, missing file,
    mismatched grids or loss units."""


class InvalidLoadingError(ConfigurationError):
    """Factor loadings leave no room for the idiosyncratic term."""

    def __init__(self, message: str, name_id: str | None = None):
        super().__init__(message)
        self.name_id = name_id


class CalibrationError(EntropicBespokeError):
    """Dual optimization failed to converge."""

    def __init__(self, message: str, gradient_norm: float | None = None,
                 iterations: int | None = None):
        super().__init__(message)
        self.gradient_norm = gradient_norm
        self.iterations = iterations


class InfiniteDivergenceError(EntropicBespokeError):
    """KL divergence is +inf: the candidate measure puts mass where the
    reference measure has none."""


class InfeasibleAdjustmentError(EntropicBespokeError):
    """Requested expected loss lies outside what exponential tilting of the
    given measure can reach."""

    def __init__(self, message: str, attainable_range: tuple[float, float]):
        super().__init__(message)
        self.attainable_range = attainable_range


class MappingConvergenceError(EntropicBespokeError):
    """Probability-matching strike search found no fixed point."""


class UndefinedSpreadError(EntropicBespokeError):
    """Par spread undefined because the risky annuity is zero."""
