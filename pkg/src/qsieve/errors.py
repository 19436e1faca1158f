"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`QSieveError`.
The CLI maps :class:`InputError` (and subclasses) to exit code 1 and
:class:`NumericalError` to exit code 2.
"""


class QSieveError(Exception):
    """Base class for package errors."""


class InputError(QSieveError, ValueError):
    """Invalid or out-of-domain input."""


class ConfigError(InputError):
    """Malformed or inconsistent configuration."""


class CapabilityError(InputError):
    """Request exceeds what a basis family or rule supports."""


class GenerationError(QSieveError, RuntimeError):
    """A simulator produced an inadmissible value."""


class NumericalError(QSieveError, ArithmeticError):
    """A numerical procedure failed."""


class ConvergenceError(NumericalError):
    """An iteration hit its budget before meeting tolerance."""

    def __init__(self, message, residual, iterations):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class StudyError(NumericalError):
    """Too many replications of a study failed."""
