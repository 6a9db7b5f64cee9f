"""Exception hierarchy shared by every module of the package."""


class HSCPError(Exception):
    """Base class for all package errors."""


class ValidationError(HSCPError, ValueError):
    """Invalid input, configuration or file contents (CLI exit code 2)."""


class NumericalError(HSCPError, ArithmeticError):
    """A numerical procedure failed or diverged (CLI exit code 3)."""


class NotSymmetric(ValidationError):
    pass


class NoConvergence(NumericalError):
    pass


class InvalidParameter(ValidationError):
    """Raised for out-of-range scalars (negative sd, tau <= 0, df < p, ...)."""


class NonPositiveDiagonal(ValidationError):
    pass


class NotSPD(NumericalError):
    pass


class ShapeMismatch(ValidationError):
    pass


class UnknownSite(ValidationError):
    pass


class MissingAdversary(ValidationError):
    pass


class InvalidMethodConfig(ValidationError):
    pass


class NonFiniteGradient(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, message, last_finite_iteration=None):
        super().__init__(message)
        self.last_finite_iteration = last_finite_iteration


class DegenerateSite(ValidationError):
    pass


class TooFewSubjects(ValidationError):
    pass


class BadMagic(ValidationError):
    pass


class TruncatedFile(ValidationError):
    pass


class InvariantViolation(ValidationError):
    pass
