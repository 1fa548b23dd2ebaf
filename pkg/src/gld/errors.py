"""Exception types shared across the solver."""

__all__ = [
    "ConfigurationError",
    "MeshError",
    "AssemblyError",
    "SingularMatrixError",
    "StepError",
    "DivergenceError",
    "StabilityViolationError",
]


class ConfigurationError(ValueError):
    """Invalid configuration input; carries the list of violations."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


class AssemblyError(RuntimeError):
    """Local or global assembly failed."""


class SingularMatrixError(AssemblyError):
    """A factorization encountered a (numerically) singular matrix."""

    def __init__(self, message, row=None):
        self.row = row
        super().__init__(message)


class StepError(RuntimeError):
    """A time step failed; carries the last Newton residual."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class DivergenceError(StepError):
    """The Newton residual became non-finite."""


class StabilityViolationError(RuntimeError):
    """The discrete energy increased beyond the allowed tolerance."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)
