"""Exception types raised by the solver."""


class CapacityError(ValueError):
    """Exact transport requested on a grid beyond the desk-scale cap."""


class KernelUnderflowError(RuntimeError):
    """Scaled-domain kernel underflowed; rerun in log-domain mode."""


class SinkhornDivergedError(RuntimeError):
    """Scaling iterations did not reach the marginal tolerance."""

    def __init__(self, message, marginal_error, iterations):
        super().__init__(message)
        self.marginal_error = marginal_error
        self.iterations = iterations


class StepRejectedError(RuntimeError):
    """A time step violated the one-step dissipation inequality beyond slack."""

    def __init__(self, message, gap):
        super().__init__(message)
        self.gap = gap


class BoundaryMassError(RuntimeError):
    """Too much mass reached the boundary layer; the box is too small."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""
