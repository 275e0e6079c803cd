"""Age-minimal task offloading: nested-index scheduling, exact per-user MDP
solvers, closed-form indices, fluid-limit programs, and benchmark policies."""

__version__ = "0.1.0"

from .model import (
    Computing,
    GroupSpec,
    Idle,
    NoOp,
    Offload,
    ScenarioConfig,
    UserModel,
    sample_transition,
    stage_cost,
    successor_distribution,
)
from .scenario_io import parse_scenario, scale_scenario, serialize_scenario
from .solver import relative_value_iteration
from .statespace import TruncatedStateSpace

__all__ = [
    "__version__",
    "Computing",
    "GroupSpec",
    "Idle",
    "NoOp",
    "Offload",
    "ScenarioConfig",
    "UserModel",
    "TruncatedStateSpace",
    "sample_transition",
    "stage_cost",
    "successor_distribution",
    "parse_scenario",
    "scale_scenario",
    "serialize_scenario",
    "relative_value_iteration",
]
