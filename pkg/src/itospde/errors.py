"""Exception types raised across the package."""


class ItoSpdeError(Exception):
    """Base class for all package errors."""


class EmptyInterior(ItoSpdeError):
    """The domain indicator selects no lattice node."""


class GridMismatch(ItoSpdeError):
    """Two grid functions live on different grids."""


class OrderTooHigh(ItoSpdeError):
    """A derivative order exceeds the active Sobolev order."""


class SolverDivergence(ItoSpdeError):
    """Conjugate gradient hit its iteration cap before reaching tolerance."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class AssumptionViolated(ItoSpdeError):
    """Coefficient or data assumptions of an experiment do not hold."""


class ConfigError(ItoSpdeError):
    """Malformed or incomplete run configuration."""
