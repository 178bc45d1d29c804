"""Exception hierarchy for fdivlab.

Every error raised by the library on a violated precondition or a detected
numerical pathology derives from :class:`FdivlabError`, so callers can fence
off library failures from programming errors with a single except clause.
"""


class FdivlabError(Exception):
    """Base class for all fdivlab errors."""


class DimensionMismatch(FdivlabError):
    """Shapes of two coupled objects disagree (matrix/vector/grid sizes)."""


class NegativeRate(FdivlabError):
    """An off-diagonal entry of a jump-rate matrix is negative."""


class FamilyMismatch(FdivlabError):
    """An operation received objects from incompatible model families."""


class Reducible(FdivlabError):
    """The generator has more than one invariant distribution."""


class NotNormalizable(FdivlabError):
    """A density cannot be normalized (zero or non-finite total mass)."""


class AbsoluteContinuityViolated(FdivlabError):
    """mu puts mass where nu has none, so dmu/dnu does not exist."""


class StepTooLarge(FdivlabError):
    """Explicit time step violates the positivity/stability precondition."""


class NonPositiveSeries(FdivlabError):
    """A log-linear fit was requested on a series with non-positive entries."""


class ZeroDensityCell(FdivlabError):
    """A pointwise density operation hit a cell with no usable mass."""


class DegenerateFilter(FdivlabError):
    """The Bayes update normalizer underflowed; posterior is undefined."""


class CovarianceBlowup(FdivlabError):
    """A covariance recursion exceeded the configured norm bound."""


class UnsupportedFamily(FdivlabError):
    """The requested operation is not defined for this model family."""


class DegenerateMeasure(FdivlabError):
    """A strictly positive probability vector was required but not given."""


class ZeroEssInf(FdivlabError):
    """The essential infimum of a density ratio is zero; bound is vacuous."""


class IllConditionedRegression(FdivlabError):
    """Regression design matrix condition number exceeds the safe bound."""


class ConfigInvalid(FdivlabError):
    """A scenario configuration violates the schema; message names the field."""


class IoFailure(FdivlabError):
    """An output artifact could not be written."""
