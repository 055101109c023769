"""Discretely reflected quadratic BSDEs: solvers, reference, error harness and valuation."""

__version__ = "0.1.0"

from .model import (Driver, ForwardModel, MarketSpec, ModelError, Obstacle, Partition, build_driver_from_market,
                    gronwall_bound, lipschitz_bound, theoretical_bounds, z_bound)
from .pde import SolverError, SpaceGrid, solve_interval
from .presets import PRESETS, ConfigError, Problem, preset
from .reflected import solve_continuous_reference, solve_discrete

__all__ = [
    "Driver", "ForwardModel", "MarketSpec", "ModelError", "Obstacle", "Partition", "build_driver_from_market",
    "gronwall_bound", "lipschitz_bound", "theoretical_bounds", "z_bound", "SolverError", "SpaceGrid",
    "solve_interval", "PRESETS", "ConfigError", "Problem", "preset", "solve_continuous_reference",
    "solve_discrete",
]
