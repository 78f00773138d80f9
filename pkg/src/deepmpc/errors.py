"""Exception types shared across the package."""


class DeepMpcError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DeepMpcError, ValueError):
    """Raised when an argument violates a documented precondition."""


class DimensionError(InvalidInputError):
    """Raised when array shapes do not compose."""


class SolverError(DeepMpcError):
    """Raised when an iterative solver fails to reach its tolerance.

    Attributes:
        residual: Final residual at the point of failure.
    """

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class CapabilityError(DeepMpcError):
    """Raised when a system lacks the structure an operation needs."""


class ConfigurationError(DeepMpcError, ValueError):
    """Raised for contradictory or infeasible experiment settings."""


class GovernorError(DeepMpcError):
    """Raised when the reference governor cannot produce a feasible plan.

    Attributes:
        violation: Worst constraint or terminal violation reached.
    """

    def __init__(self, message: str, violation: float = float("nan")):
        super().__init__(message)
        self.violation = violation


class TrainingDivergedError(DeepMpcError):
    """Raised when network training produces a non-finite loss."""
