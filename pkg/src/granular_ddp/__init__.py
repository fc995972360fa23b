"""Trajectory optimization of granular material shape via a reduced learned simulator."""

from .exceptions import (
    ConfigurationError,
    InsufficientDataError,
    NumericError,
    ShapeError,
    SimulationDivergence,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "InsufficientDataError",
    "NumericError",
    "ShapeError",
    "SimulationDivergence",
    "TrainingError",
    "__version__",
]
