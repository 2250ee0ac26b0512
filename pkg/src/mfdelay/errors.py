"""Exception types raised by the numerical modules."""

from __future__ import annotations


class MfDelayError(Exception):
    """Base class for all library errors."""


class DomainError(MfDelayError, ValueError):
    """An argument lies outside the domain of the operation."""


class DiagonalSingularityError(DomainError):
    """The fractional kernel was evaluated on its diagonal t = s."""


class GridMismatchError(MfDelayError, ValueError):
    """Two grid-carried objects do not live on the same time grid."""


class FactorizationError(MfDelayError, ArithmeticError):
    """Dense Cholesky factorization failed."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"covariance matrix not positive definite at pivot {pivot}")


class NegativeEigenvalueError(MfDelayError, ArithmeticError):
    """Circulant embedding produced a negative eigenvalue."""

    def __init__(self, min_eigenvalue: float):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(
            f"circulant embedding not nonnegative definite (min eigenvalue {min_eigenvalue:.3e}); "
            "fall back to the Cholesky sampler"
        )


class BlowUpError(MfDelayError, ArithmeticError):
    """Forward simulation produced a non-finite state."""

    def __init__(self, particle: int, step: int):
        self.particle = particle
        self.step = step
        super().__init__(f"non-finite state for particle {particle} at step {step}")


class NonDifferentiableError(MfDelayError, ArithmeticError):
    """A derivative could not be evaluated at the requested point."""


class RankDeficientRegressionError(MfDelayError, ArithmeticError):
    """Least-squares regression is too ill-conditioned to trust."""

    def __init__(self, node: int, condition_number: float, message: str | None = None):
        self.node = node
        self.condition_number = condition_number
        super().__init__(
            message or f"regression at node {node} is rank deficient (condition number {condition_number:.3e})"
        )


class AdmissibilityError(MfDelayError, ValueError):
    """A control takes values outside the admissible set."""


class OptimalityConditionError(MfDelayError, ArithmeticError):
    """A condition required by the optimal-control formula does not hold."""


class NonConvergenceError(MfDelayError, ArithmeticError):
    """A fixed-point iteration reached its iteration limit."""

    def __init__(self, history: list[float], message: str | None = None):
        self.history = list(history)
        last = self.history[-1] if self.history else float("nan")
        super().__init__(message or f"no convergence after {len(self.history)} iterations (last residual {last:.3e})")
