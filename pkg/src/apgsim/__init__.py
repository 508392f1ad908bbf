"""Differentiable 2D driving simulator and training toolkit.

Rolls out a recurrent stochastic policy in a tiny kinematic simulator,
backpropagates state-matching losses through the dynamics Jacobians
(analytic policy gradients), and ships a behaviour-cloning baseline,
evaluation metrics, a synthetic scenario generator, and a CLI.
"""

__version__ = "0.1.0"

from .core import (
    Action,
    AgentState,
    DynamicsKind,
    Polyline,
    Scenario,
    SimState,
    Trajectory,
    wrap_yaw,
    yaw_diff,
)

__all__ = [
    "Action",
    "AgentState",
    "DynamicsKind",
    "Polyline",
    "Scenario",
    "SimState",
    "Trajectory",
    "wrap_yaw",
    "yaw_diff",
    "__version__",
]
