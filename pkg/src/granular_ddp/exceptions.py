"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters, ranges or shapes in a configuration."""


class ShapeError(ValueError):
    """Array shapes that do not agree with each other or with a fitted object."""


class SimulationDivergence(FloatingPointError):
    """The ground-truth simulator produced non-finite state."""

    def __init__(self, time_index, message=None):
        self.time_index = time_index
        super().__init__(message or f"simulation diverged at time index {time_index}")


class NumericError(FloatingPointError):
    """Non-finite values inside the learned model or optimizer."""


class TrainingError(NumericError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite training loss at step {step}")


class InsufficientDataError(ValueError):
    pass
