"""Numerics for gamma-stable super-Brownian motion: log-Laplace solver, explosion law,
branching particle simulator and density diagnostics."""

__version__ = "0.1.0"

from .errors import ConfigurationError, ConvergenceError, DomainError, PreconditionError
from .explosion import ExplosionLaw
from .heatkernel import FiniteMeasure, GridField, GridSpec
from .loglaplace import GammaParams, NonlinearitySpec, PicardConfig, solve, solve_function_ic
from .particles import SimConfig, TestFunction, simulate, simulate_many

__all__ = [
    "ConfigurationError", "ConvergenceError", "DomainError", "PreconditionError", "ExplosionLaw",
    "FiniteMeasure", "GridField", "GridSpec", "GammaParams", "NonlinearitySpec", "PicardConfig", "solve",
    "solve_function_ic", "SimConfig", "TestFunction", "simulate", "simulate_many",
]
