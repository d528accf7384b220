"""Exception types shared across the package."""


class SdetciError(Exception):
    """Base class for all package errors."""


class InvalidCoefficient(SdetciError):
    """A coefficient evaluated to a non-finite value."""

    def __init__(self, name, point):
        self.name = name
        self.point = point
        super().__init__(f"coefficient {name!r} is non-finite at {point}")


class MollifierError(SdetciError):
    """Mollifier quadrature did not converge."""


class BlowupError(SdetciError):
    """A simulated path left the finite range at a known step."""

    def __init__(self, step):
        self.step = step
        super().__init__(f"path blew up at step {step}")


class GridMismatch(SdetciError):
    """Two path objects do not share the same time grid."""


class NotContractive(SdetciError):
    """The Picard map failed to contract at the given regularization level."""

    def __init__(self, lam, ratios):
        self.lam = lam
        self.ratios = list(ratios)
        super().__init__(f"fixed-point iteration not contractive at lambda={lam}")


class EllipticSolverError(SdetciError):
    """Sparse elliptic solve failed."""


class GradientTooLarge(SdetciError):
    """Measured sup-gradient of u exceeds the acceptance threshold."""

    def __init__(self, grad_bound, threshold):
        self.grad_bound = grad_bound
        self.threshold = threshold
        super().__init__(
            f"grad bound {grad_bound:.4f} >= threshold {threshold:.4f}; raise lambda"
        )


class OutOfDomain(SdetciError):
    """A point left the grid box during evaluation or inversion."""


class InconclusiveEstimate(SdetciError):
    """Monte Carlo noise exceeds the signal being measured."""


class FitFailure(SdetciError):
    """No finite constants satisfy the target inequality on the fit grid."""

    def __init__(self, message, worst_point=None):
        self.worst_point = worst_point
        super().__init__(message)


class ConsistencyFailure(SdetciError):
    """Pathwise transform error failed to decrease under mesh refinement."""


class UseSinkhorn(SdetciError):
    """Instance too large for the exact transport solver."""


class ConfigError(SdetciError):
    """Configuration file is malformed."""

    def __init__(self, message, key_path=""):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)
