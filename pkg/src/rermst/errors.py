"""Exception hierarchy.

Validation problems (bad inputs, bad configuration) derive from
``ValidationError``; failures of an estimator on otherwise valid input derive
from ``NumericalError``. The CLI maps the two families to exit codes 1 and 2.
"""


class RMSTError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RMSTError, ValueError):
    pass


class NumericalError(RMSTError, ArithmeticError):
    pass


class DomainError(ValidationError):
    """An input lies outside the domain of the operation."""


class ClusterTooSmallError(ValidationError):
    def __init__(self, cluster_id, size, minimum):
        self.cluster_id = cluster_id
        self.size = size
        self.minimum = minimum
        super().__init__(
            f"cluster {cluster_id} has {size} subject(s); at least {minimum} required"
        )


class IdentifiabilityError(ValidationError):
    """Too few clusters (or cluster fits) to separate the random effect."""


class SingularDesignError(NumericalError):
    """Design matrix is rank deficient."""


class PositivityError(NumericalError):
    """A censoring-survival weight denominator is zero."""


class ConvergenceError(NumericalError):
    pass


class SaturationError(NumericalError):
    """Inverse link overflowed for an extreme linear predictor."""


class CalibrationError(NumericalError):
    pass


class HarnessError(NumericalError):
    """Monte Carlo configuration produced too many failed replicates."""


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
