"""Exception hierarchy for mlkbf."""

from typing import Any, Optional


class MLKBFError(Exception):
    """Base class for every error raised by mlkbf."""


# Input validation


class DimensionMismatch(MLKBFError, ValueError):
    """Array shapes disagree with the model dimensions."""


class DimensionTooSmall(MLKBFError, ValueError):
    """State dimension below the minimum a drift stencil needs."""


class SingularRsqrt(MLKBFError, ValueError):
    """Observation noise square root is singular or ill-conditioned."""


class LevelAboveSource(MLKBFError, ValueError):
    """Requested coarsening target is finer than the source path."""


class TooFewParticles(MLKBFError, ValueError):
    """Ensemble too small for a sample covariance."""


class AllocationTooSmall(MLKBFError, ValueError):
    """A level of the multilevel allocation received fewer than two particles."""


class NonPositivePoint(MLKBFError, ValueError):
    """A log-log fit received a non-positive coordinate."""


class InvalidCovariance(MLKBFError, ValueError):
    """A covariance or noise square root is not symmetric PSD."""


class UnsupportedDrift(MLKBFError, ValueError):
    """Operation needs a linear drift but the model is nonlinear."""


# Numerical failures


class CovarianceBlowup(MLKBFError, ArithmeticError):
    """Riccati covariance left the configured bound."""

    def __init__(self, step: int, bound: float, value: float):
        super().__init__(f"Covariance entry {value:.6g} exceeds bound {bound:.6g} at step {step}")
        self.step = step
        self.bound = bound
        self.value = value

    def __reduce__(self):
        return type(self), (self.step, self.bound, self.value)


class SingularCovariance(MLKBFError, ArithmeticError):
    """Regularized sample covariance could not be factorized."""


class NonFiniteState(MLKBFError, ArithmeticError):
    """Ensemble or accumulator became NaN or infinite."""


class NonFiniteTheta(MLKBFError, ArithmeticError):
    """Parameter iterate diverged; carries the trajectory of the completed iterations."""

    def __init__(self, iteration: int, trajectory: Optional[Any] = None):
        super().__init__(f"Parameter iterate became non-finite at iteration {iteration}")
        self.iteration = iteration
        self.trajectory = trajectory

    def __reduce__(self):
        return type(self), (self.iteration, self.trajectory)
