"""Exception types raised across the package."""


class GrainFieldError(Exception):
    """Base class for all package errors."""


class NumericalFailure(GrainFieldError):
    """A quadrature or series evaluation did not reach its tolerance."""


class ConfigurationError(GrainFieldError):
    """Inputs are inconsistent, e.g. a window too small for the test function."""


class UndefinedRankError(GrainFieldError):
    """Every Charlier coefficient up to the maximal order is numerically zero."""


class IllConditionedError(GrainFieldError):
    """Correlation too close to one for the Mehler series to be usable."""


class DegenerateSampleError(GrainFieldError):
    """Sample has too many ties (or too few points) for the requested estimator."""


class DegenerateDenominatorError(GrainFieldError):
    """Hopf-Cole denominator vanished to working precision."""


class IntegrityError(GrainFieldError):
    """An output file does not match the hash recorded in its manifest."""
