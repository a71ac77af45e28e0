"""Exception types shared across the package."""


class FastslowError(Exception):
    """Base class for all package-specific failures."""


class EpsilonTooLarge(FastslowError):
    """epsilon violates the cone smallness condition eps <= (lam-2)/(M(M+1))."""


class NoConvergence(FastslowError):
    """An iterative solver exhausted its iteration budget."""


class NotExpanding(FastslowError):
    """The certified fibre expansion lower bound is too small."""


class ContractionNotCertified(FastslowError):
    """The certified slope-recursion contraction factor is >= 1."""


class NotOmega1(FastslowError):
    """The averaged drift does not have exactly one non-degenerate sink/source pair."""


class NotMostlyExpanding(FastslowError):
    """Normalization requested for a system that is not mostly expanding."""


class BandViolated(FastslowError):
    """A centre-expansion product left its certified band."""


class CurveTooLong(FastslowError):
    """A pushed-forward curve image exceeds half the circle (delta misconfigured)."""


class InfeasibleConstants(FastslowError):
    """The standard-pair/patch constants ledger has no feasible solution."""


class HeightOutOfRange(FastslowError):
    """Requested rectangle height is outside the admissible band."""


class LeafValidationFailed(FastslowError):
    """A foliation leaf failed prestandard-curve validation."""


class ZTooSmall(FastslowError):
    """Adapted cutting requires Z > 4*exp(Lambda_c*T0)."""


class KappaTooLarge(FastslowError):
    """Smooth density is too rough to disintegrate into a proper patch family."""


class ChartInfeasible(FastslowError):
    """Centre-direction shear too large for graph charts at this epsilon."""


class DegenerateFit(FastslowError):
    """No statistically significant window exists for a correlation fit."""


class ValidationError(FastslowError):
    """Malformed configuration or system definition file."""
