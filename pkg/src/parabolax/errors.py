"""Exception hierarchy.

``NumericalFailure`` subclasses map to CLI exit status 2, ``ConfigError`` to 1.
"""

from __future__ import annotations


class ParabolaxError(Exception):
    """Base class for all package errors."""


class ConfigError(ParabolaxError, ValueError):
    """Invalid run configuration or invalid construction arguments."""


class NumericalFailure(ParabolaxError):
    """A computation ran but did not produce a trustworthy result."""


class BlowUp(NumericalFailure):
    """State norm exceeded the blow-up threshold.

    ``t_star`` is the last time with a valid state; ``partial`` holds the
    trajectory up to that time when available.
    """

    def __init__(self, t_star: float, norm: float, partial=None):
        super().__init__(f"blow-up after t={t_star:.6g} (max-norm {norm:.3g})")
        self.t_star = t_star
        self.norm = norm
        self.partial = partial


class NonConvergence(NumericalFailure):
    """An implicit linear solve produced a residual above tolerance."""


class NoConvergence(NumericalFailure):
    """Newton iteration exhausted its budget."""


class SingularJacobian(NumericalFailure):
    """Newton Jacobian is numerically singular (non-simple element)."""


class ReturnNotFound(NumericalFailure):
    """Trajectory does not return to the Poincare section."""


class ContinuationLost(NumericalFailure):
    """Corrector failed during continuation in the parameter."""

    def __init__(self, message: str, eps: float, path=None):
        super().__init__(message)
        self.eps = eps
        self.path = path or []


class NotFound(NumericalFailure):
    """Connection search exhausted its budget."""


class NoGoodPoint(NumericalFailure):
    """No admissible base point for a bump in the requested window."""


class ColinearEverywhere(NumericalFailure):
    """The field V is colinear to the orbit velocity at every sample."""
