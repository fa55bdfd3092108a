"""Exception hierarchy for the stochastic Airy operator toolkit."""

from typing import Optional


class SAOError(ValueError):
    """Base class for every domain error raised by the services."""


class ScalingDomainError(SAOError):
    """Scaling function evaluated outside its admissible range."""


class QuadratureError(SAOError):
    """Quadrature did not stabilize under node doubling."""


class BracketError(SAOError):
    """Root bracket does not enclose a sign change."""


class PathSizeError(SAOError):
    """Requested Brownian path exceeds the configured memory cap."""


class PathCoverageError(SAOError):
    """Query or integration interval lies outside the path."""


class AlignmentError(SAOError):
    """Time or step is not aligned with the dyadic grid of the path."""


class OffGridError(SAOError):
    """Time stamp is not a grid point of the path."""


class IntegrationError(SAOError):
    """Riccati integration failed for a given spectral parameter."""

    def __init__(self, message: str, a: Optional[float] = None):
        super().__init__(message)
        self.a = a


class ConvergenceError(SAOError):
    """Iterative procedure exhausted its budget."""


class CertificateError(SAOError):
    """Horizon-doubling certificate exceeded its tolerance."""


class StitchMismatchError(SAOError):
    """Forward and backward Riccati logs disagree at the stitch point."""


class RangeError(SAOError):
    """Argument violates an operation's precondition."""


class NoCrossingError(SAOError):
    """Trajectory never crosses the barrier as required."""


class SeriesTruncationError(SAOError):
    """Series truncation error estimate exceeds tolerance; more terms needed."""


class ConfigError(SAOError):
    """Invalid experiment configuration."""
