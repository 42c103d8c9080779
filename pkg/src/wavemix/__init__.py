"""Numerical laboratory for the white-forced damped nonlinear wave equation
on a truncated line: energy balances, synchronised-coupling contraction,
drift likelihood diagnostics, stopping-time statistics, and ensemble mixing
rates."""

__version__ = "0.1.0"

from .grid import GridSpec, State, Weights
from .noise import NoiseModel
from .dynamics import Integrator, PhysParams

__all__ = [
    "GridSpec",
    "State",
    "Weights",
    "NoiseModel",
    "Integrator",
    "PhysParams",
    "__version__",
]
