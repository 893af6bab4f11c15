"""Exception hierarchy shared by the simulator modules."""


class ConfheatError(Exception):
    """Base class for all errors raised by confheat."""


class ConfigError(ConfheatError, ValueError):
    """Invalid configuration, parameters or mismatched field dimensions."""


class StateCorruptionError(ConfheatError):
    """A map field has drifted off the target manifold."""


class ProjectionDegenerateError(ConfheatError):
    """Nearest-point projection onto the sphere is undefined (|f| too small)."""


class DivergenceError(ConfheatError):
    """Non-finite values appeared while time stepping."""

    def __init__(self, step, message=None):
        self.step = step
        self.trajectory = None
        super().__init__(message or f"non-finite field values at step {step}")


class SolverError(ConfheatError):
    """An iterative linear solve failed to reach its tolerance."""
