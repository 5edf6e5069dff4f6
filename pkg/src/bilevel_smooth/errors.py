"""Exception types raised across the package."""


class BilevelError(Exception):
    """Base class for all errors raised by this package."""


class SingularMatrix(BilevelError):
    """A pivot of a dense LU factorization fell below the singularity threshold."""


class SingularSensitivity(SingularMatrix):
    """The smoothed sensitivity matrix could not be factored."""


class NonFiniteEvaluation(BilevelError):
    pass


class ShapeMismatch(BilevelError, ValueError):
    pass


class InvalidParameter(BilevelError, ValueError):
    pass


class UnknownProblem(BilevelError, KeyError):
    pass


class ValueFunctionFailure(BilevelError):
    """No multistart run of the lower-level solve reached the target residual."""


class IntractableDimension(BilevelError):
    pass


class NoFeasiblePoint(BilevelError):
    pass


class ProblemFormatError(BilevelError, ValueError):
    """Malformed declarative problem file."""
