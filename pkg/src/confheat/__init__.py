"""Finite-difference simulator for the conformal heat flow of harmonic maps
from a flat 2-torus into the unit sphere (or flat Euclidean space)."""

from .errors import (
    ConfheatError,
    ConfigError,
    DivergenceError,
    ProjectionDegenerateError,
    SolverError,
    StateCorruptionError,
)
from .fixed_point import PicardReport, picard_iterate
from .flow import FlowParams, FlowState, Trajectory, run, step
from .geometry import GridGeometry, TargetManifold
from .scenarios import Scenario, build_initial_data

__all__ = [
    "ConfheatError",
    "ConfigError",
    "DivergenceError",
    "FlowParams",
    "FlowState",
    "GridGeometry",
    "PicardReport",
    "ProjectionDegenerateError",
    "Scenario",
    "SolverError",
    "StateCorruptionError",
    "TargetManifold",
    "Trajectory",
    "build_initial_data",
    "picard_iterate",
    "run",
    "step",
]
