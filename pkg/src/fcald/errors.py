"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FcaldError(Exception):
    """Base class for all package errors."""


class ConfigError(FcaldError, ValueError):
    """Invalid grid, nonlinearity, probe or experiment configuration."""


class SolverError(FcaldError, RuntimeError):
    """A linear or nonlinear solve did not reach its tolerance.

    ``report`` carries the solver statistics at the point of failure and
    ``trace`` the residual history when one is available.
    """

    def __init__(self, message, report=None, trace=None):
        super().__init__(message)
        self.report = report
        self.trace = list(trace) if trace is not None else []


class SmallnessError(FcaldError, ValueError):
    """Dirichlet data exceed the smallness gate of the forward solver."""


class DomainError(FcaldError, ValueError):
    """A derivative order or argument outside the admissible range."""


class ExtractionError(FcaldError, RuntimeError):
    """Ladder extrapolation failed its exponent consistency check.

    ``fallback`` holds the smallest-ladder-point estimate so callers can
    flag the quantity instead of aborting.
    """

    def __init__(self, message, fallback=None, exponent=None):
        super().__init__(message)
        self.fallback = fallback
        self.exponent = exponent


class DatasetError(FcaldError, LookupError):
    """A DN dataset lookup missed, or datasets were mixed across grids/specs."""


class IllPosedError(FcaldError, RuntimeError):
    """Regularized inversion is rank deficient beyond what the penalty fixes."""

    def __init__(self, message, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values
