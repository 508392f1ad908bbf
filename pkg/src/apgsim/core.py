"""Shared domain types: agent states, actions, sim states, trajectories, scenarios.

Conventions: positions in meters, velocities in m/s, yaw in radians restricted
to the half-open interval [-pi, pi). All types are immutable after construction
and safe to share across threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class DynamicsKind(Enum):
    """Control model a scenario is configured for."""

    BICYCLE = "bicycle"
    DELTA = "delta"


ACTION_ARITY = {DynamicsKind.BICYCLE: 2, DynamicsKind.DELTA: 3}


def wrap_yaw(angle: float) -> float:
    """Wrap an angle into [-pi, pi).

    Implemented as atan2(sin(angle), cos(angle)) rather than a mod so the
    derivative stays 1 everywhere except the seam itself. Ties at the seam map
    to -pi, keeping the interval half-open; results within 1e-12 of +pi count
    as ties because inputs like float(3*pi) sit one ulp off the exact seam.
    """
    if not math.isfinite(angle):
        raise ValueError(f"wrap_yaw: angle must be finite, got {angle!r}")
    wrapped = math.atan2(math.sin(angle), math.cos(angle))
    if wrapped >= math.pi - 1e-12:
        wrapped = -math.pi
    return wrapped


def yaw_diff(a: float, b: float) -> float:
    """Shortest signed angle a - b, wrapped into [-pi, pi)."""
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError(f"yaw_diff: inputs must be finite, got {a!r}, {b!r}")
    return wrap_yaw(a - b)


def _as_float(name: str, value) -> float:
    v = float(value)
    if not math.isfinite(v):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return v


@dataclass(frozen=True)
class AgentState:
    """Kinematic state plus rectangular footprint of one agent."""

    x: float
    y: float
    yaw: float  # [-pi, pi)
    vx: float
    vy: float
    length: float
    width: float

    def __post_init__(self):
        for name in ("x", "y", "yaw", "vx", "vy", "length", "width"):
            object.__setattr__(self, name, _as_float(name, getattr(self, name)))
        if not (-math.pi <= self.yaw < math.pi):
            raise ValueError(f"yaw {self.yaw!r} outside [-pi, pi)")
        if self.length <= 0.0 or self.width <= 0.0:
            raise ValueError(f"extents must be positive, got {self.length}x{self.width}")

    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def pose_vec(self) -> np.ndarray:
        """Kinematic state as the vector (x, y, yaw, vx, vy)."""
        return np.array([self.x, self.y, self.yaw, self.vx, self.vy])

    def with_pose(self, pose: np.ndarray) -> "AgentState":
        """New state with this agent's footprint and the given kinematic vector."""
        x, y, yaw, vx, vy = (float(v) for v in pose)
        return AgentState(x, y, yaw, vx, vy, self.length, self.width)


@dataclass(frozen=True)
class Action:
    """Per-agent control input.

    Bicycle actions are (accel m/s^2, steer 1/m curvature); delta actions are
    (dx m, dy m, dyaw rad). The kind must match the scenario's dynamics model.
    """

    kind: DynamicsKind
    components: tuple

    def __post_init__(self):
        comps = tuple(_as_float(f"component {i}", c) for i, c in enumerate(self.components))
        object.__setattr__(self, "components", comps)
        if len(comps) != ACTION_ARITY[self.kind]:
            raise ValueError(
                f"{self.kind.value} action needs {ACTION_ARITY[self.kind]} components, "
                f"got {len(comps)}"
            )

    @staticmethod
    def bicycle(accel: float, steer: float) -> "Action":
        return Action(DynamicsKind.BICYCLE, (accel, steer))

    @staticmethod
    def delta(dx: float, dy: float, dyaw: float) -> "Action":
        return Action(DynamicsKind.DELTA, (dx, dy, dyaw))

    @staticmethod
    def from_vec(kind: DynamicsKind, vec) -> "Action":
        return Action(kind, tuple(float(v) for v in vec))

    def as_vec(self) -> np.ndarray:
        return np.array(self.components)

    def _require(self, kind: DynamicsKind):
        if self.kind is not kind:
            raise ValueError(f"action is {self.kind.value}, not {kind.value}")

    @property
    def accel(self) -> float:
        self._require(DynamicsKind.BICYCLE)
        return self.components[0]

    @property
    def steer(self) -> float:
        self._require(DynamicsKind.BICYCLE)
        return self.components[1]

    @property
    def dx(self) -> float:
        self._require(DynamicsKind.DELTA)
        return self.components[0]

    @property
    def dy(self) -> float:
        self._require(DynamicsKind.DELTA)
        return self.components[1]

    @property
    def dyaw(self) -> float:
        self._require(DynamicsKind.DELTA)
        return self.components[2]


@dataclass(frozen=True)
class SimState:
    """Full simulator snapshot at one timestep."""

    t: int
    agents: tuple
    valid: tuple
    controlled: tuple

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "valid", tuple(bool(v) for v in self.valid))
        object.__setattr__(self, "controlled", tuple(bool(c) for c in self.controlled))
        n = len(self.agents)
        if n < 1:
            raise ValueError("SimState needs at least one agent")
        if len(self.valid) != n or len(self.controlled) != n:
            raise ValueError(
                f"mask lengths ({len(self.valid)}, {len(self.controlled)}) "
                f"do not match {n} agents"
            )
        if not isinstance(self.t, int) or self.t < 0:
            raise ValueError(f"timestep must be a non-negative int, got {self.t!r}")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def controlled_indices(self) -> list:
        return [i for i, c in enumerate(self.controlled) if c]


@dataclass(frozen=True)
class Trajectory:
    """A run of sim states with strictly consecutive timestep indices."""

    states: tuple
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "dt", _as_float("dt", self.dt))
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.states:
            raise ValueError("trajectory must contain at least one state")
        n = self.states[0].n_agents
        for prev, cur in zip(self.states, self.states[1:]):
            if cur.t != prev.t + 1:
                raise ValueError(f"timesteps must increase by 1, got {prev.t} -> {cur.t}")
        for s in self.states:
            if s.n_agents != n:
                raise ValueError("all states must have the same agent count")

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True, eq=False)
class Polyline:
    """Road centerline with a drivable corridor of the given half-width."""

    points: np.ndarray  # (P, 2)
    half_width: float

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError(f"polyline needs shape (P>=2, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("polyline points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "half_width", _as_float("half_width", self.half_width))
        if self.half_width <= 0.0:
            raise ValueError(f"half_width must be positive, got {self.half_width}")


@dataclass(frozen=True, eq=False)
class Scenario:
    """One driving scene: roadgraph, expert log trajectory, and control masks.

    The log covers history_len past steps, the shared initial state, and
    horizon future steps (length history_len + horizon + 1). The initial sim
    state is the log state at index history_len.
    """

    id: str
    roadgraph: tuple
    log: Trajectory
    is_modeled: tuple
    dynamics: DynamicsKind
    history_len: int
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "roadgraph", tuple(self.roadgraph))
        object.__setattr__(self, "is_modeled", tuple(bool(m) for m in self.is_modeled))
        if not self.roadgraph:
            raise ValueError("scenario needs at least one roadgraph polyline")
        if self.history_len < 0 or self.horizon < 1:
            raise ValueError(
                f"need history_len >= 0 and horizon >= 1, got "
                f"{self.history_len}, {self.horizon}"
            )
        expect = self.history_len + self.horizon + 1
        if len(self.log) != expect:
            raise ValueError(
                f"log has {len(self.log)} states, expected "
                f"history_len + horizon + 1 = {expect}"
            )
        if len(self.is_modeled) != self.n_agents:
            raise ValueError("is_modeled length does not match agent count")
        if self.log.states[0].t != 0:
            raise ValueError("log must start at timestep 0")
        # Flattened roadgraph caches used by observation building and metrics.
        pts = np.concatenate([p.points for p in self.roadgraph], axis=0)
        hws = np.concatenate(
            [np.full(len(p.points), p.half_width) for p in self.roadgraph]
        )
        pts.setflags(write=False)
        hws.setflags(write=False)
        object.__setattr__(self, "_road_points", pts)
        object.__setattr__(self, "_road_half_widths", hws)

    @property
    def init(self) -> SimState:
        return self.log.states[self.history_len]

    @property
    def dt(self) -> float:
        return self.log.dt

    @property
    def n_agents(self) -> int:
        return self.log.states[0].n_agents

    @property
    def road_points(self) -> np.ndarray:
        """All roadgraph points flattened to one (R, 2) array."""
        return self._road_points

    @property
    def road_half_widths(self) -> np.ndarray:
        return self._road_half_widths
