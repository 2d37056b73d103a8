"""Exception hierarchy shared by every unlearning mechanism."""


class UnlearnError(Exception):
    """Base class for all errors raised by unlearnkit."""


class DegenerateInput(UnlearnError, ValueError):
    """Input is structurally valid but too small or empty to operate on."""


class ShapeError(UnlearnError, ValueError):
    pass


class MissingSample(UnlearnError, KeyError):
    """A sample identifier is not present in the table or model."""

    def __str__(self):
        return Exception.__str__(self)


class NumericalDivergence(UnlearnError, ArithmeticError):
    pass


class SingularCurvature(UnlearnError, ArithmeticError):
    """Curvature matrix is not safely positive definite.

    ``min_eigenvalue`` carries the offending eigenvalue when it is known.
    """

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class EmptyHistory(UnlearnError, ValueError):
    pass


class HistoryMismatch(UnlearnError, ValueError):
    pass


class InsufficientSeries(UnlearnError, ValueError):
    pass


class InvalidMeasurement(UnlearnError, ValueError):
    pass


class NoBaseline(UnlearnError, ValueError):
    pass


class ConfigError(UnlearnError, ValueError):
    pass
