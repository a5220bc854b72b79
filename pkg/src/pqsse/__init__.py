"""Simulation and analysis of a free particle under continuous, simultaneous
position and momentum measurement."""
from .core import (
    MomentState,
    NoiseIncrement,
    PhysParams,
    TrajectoryRecord,
    validate_params,
)
from .analytic import FixedPoint, StabilityReport, fixed_point, phase_constants, stability_matrix
from .noise import NoisePath, make_path
from .grid import GridSpec, WaveFunction

__version__ = "0.1.0"

__all__ = [
    "FixedPoint",
    "GridSpec",
    "MomentState",
    "NoiseIncrement",
    "NoisePath",
    "PhysParams",
    "StabilityReport",
    "TrajectoryRecord",
    "WaveFunction",
    "fixed_point",
    "make_path",
    "phase_constants",
    "stability_matrix",
    "validate_params",
]
