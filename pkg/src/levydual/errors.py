"""Exception hierarchy shared by the simulation, duality and oracle layers."""


class LevyDualError(Exception):
    """Base class for every error raised by :mod:`levydual`."""


class ValidationError(LevyDualError, ValueError):
    """Inputs violate a documented precondition."""


class DiscretizationError(LevyDualError, ArithmeticError):
    """A multiplicative step factor became non-positive and could not be repaired."""

    def __init__(self, message, step=None, path=None):
        super().__init__(message)
        self.step = step
        self.path = path


class InadmissibleStrategyError(LevyDualError, ValueError):
    """A trading strategy drove wealth negative."""

    def __init__(self, message, step=None, beta=None):
        super().__init__(message)
        self.step = step
        self.beta = beta


class NoEquivalentMeasureError(LevyDualError):
    """No local-martingale deflator with F > -1 solves the zero-drift equation."""


class UnsupportedStructureError(LevyDualError):
    """The jump structure is outside the supported finite-atom / multiplicative cases."""


class DomainError(LevyDualError, ValueError):
    """The requested initial wealth lies outside the non-trivial range (0, w_Gamma)."""


class NumericalFailure(LevyDualError, RuntimeError):
    """An iterative solver could not produce a finite answer."""


class ArbitrageError(ValidationError):
    """A tree node admits no risk-neutral branch probabilities."""
