"""Exception types raised by the identification pipeline."""


class RbmsError(Exception):
    """Base class for all package errors."""


class NonFiniteState(RbmsError, ArithmeticError):
    """A simulated state contained NaN or Inf.

    ``discarded`` carries the number of trajectories dropped when raised
    from an ensemble run.
    """

    def __init__(self, message, discarded=0):
        super().__init__(message)
        self.discarded = discarded


class NonFinitePrediction(RbmsError, ArithmeticError):
    """A propagated sigma point became non-finite."""


class SingularCovariance(RbmsError, ArithmeticError):
    """Cholesky factorization failed even after jitter was added."""


class SaturatedRegion(RbmsError):
    """No unsampled node is left in any peak neighbourhood."""

    def __init__(self, message, samples=None):
        super().__init__(message)
        self.samples = samples


class SingularDiffusion(RbmsError, ArithmeticError):
    """The diffusion coefficient vanishes inside an escape interval."""

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class IncreaseMaxTime(RbmsError):
    """Too many Monte Carlo escape trajectories were censored."""

    def __init__(self, message, censored_fraction=None):
        super().__init__(message)
        self.censored_fraction = censored_fraction


class TrainingDiverged(RbmsError):
    """Loss stayed far above its initial value for too many steps."""


class ConfigError(RbmsError, ValueError):
    """Invalid experiment configuration."""
