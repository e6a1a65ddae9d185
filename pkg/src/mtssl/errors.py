"""Exception types raised across the library.

Each exception maps to one well-defined failure mode so callers can
distinguish bad inputs (fixable by the user) from numerical breakdowns
(fixable by changing hyperparameters, usually alpha).
"""


class MtsslError(Exception):
    """Base class for all library errors."""


class DegenerateClass(MtsslError):
    """A class of some task has no samples (or no labeled samples) while
    calibration was requested."""


class DegenerateTask(MtsslError):
    """The two class means of a task are indistinguishable (their estimated
    difference has near-zero norm)."""


class NoConvergence(MtsslError):
    """An iterative solver hit its iteration cap before reaching tolerance."""


class AlphaTooSmall(MtsslError):
    """Regularization alpha does not exceed the spectral norm of the coupled
    weight operator, so the optimization problem is non-convex."""


class SingularSystem(MtsslError):
    """A linear solve reported rank deficiency; signals numerical breakdown."""


class IndefiniteCoupling(MtsslError):
    """The task-coupling matrix has a significantly negative eigenvalue, so
    its PSD square root does not exist."""


class InvalidRegion(MtsslError):
    """The deterministic-equivalent fixed point does not exist for these
    parameters (alpha too small)."""


class SingularMatrix(MtsslError):
    """A resolvent-style matrix inversion is numerically singular; signals an
    invalid parameter region."""


class DivergentSeries(MtsslError):
    """The second-order equivalent does not exist (its defining series
    diverges)."""


class NegativeVariance(MtsslError):
    """The predicted score variance came out negative beyond tolerance;
    theory inputs are outside the validity region."""


class InsufficientData(MtsslError):
    """Not enough labeled samples for an estimation step."""


class GenuineClassUnknown(MtsslError):
    """Ground-truth classes behind probabilistic labels were requested but
    are not available."""


class IllConditioned(MtsslError):
    """A matrix involved in label optimization is too ill-conditioned to
    invert reliably."""


class DegenerateSeparation(MtsslError):
    """Predicted class means do not separate (m2 <= m1) where a threshold
    formula divides by their gap."""


class DomainError(MtsslError):
    """Function argument outside its mathematical domain."""


class DimensionMismatch(MtsslError):
    """Shapes of model and data do not agree."""


class NoValidAlpha(MtsslError):
    """Every point of the regularization grid failed."""


class Unreachable(MtsslError):
    """No feasible count reaches the requested target performance."""


class SchemaError(MtsslError):
    """An input file does not match the expected schema."""
