"""Numerical laboratory for stochastic scalar conservation laws on the torus."""

__version__ = "0.1.0"

from .grid import Field, SpectralField, TorusGrid, l1_norm, l2_norm, mean, sobolev_seminorm
from .model import FluxDiffusionModel, builtin_models, eta, get_model
from .noise import NoiseModel, NoisePath, make_sigma
from .solver import SolverConfig, Trajectory, run, step

__all__ = [
    "Field",
    "FluxDiffusionModel",
    "NoiseModel",
    "NoisePath",
    "SolverConfig",
    "SpectralField",
    "TorusGrid",
    "Trajectory",
    "builtin_models",
    "eta",
    "get_model",
    "l1_norm",
    "l2_norm",
    "make_sigma",
    "mean",
    "run",
    "sobolev_seminorm",
    "step",
]
