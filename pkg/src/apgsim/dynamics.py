"""Bicycle and delta dynamics: forward steps, exact inverses, closed-form Jacobians.

The bicycle step is explicit Euler with the position advanced by the current
speed and heading:

    v       = sqrt(vx^2 + vy^2 + 1e-12)
    yaw'    = wrap(yaw + v * steer * dt)        steer is curvature [1/m]
    v'      = v + accel * dt
    x'      = x + v * cos(yaw) * dt
    y'      = y + v * sin(yaw) * dt
    vx', vy' = v' * cos(yaw'), v' * sin(yaw')

The delta step applies a raw displacement: x' = x + dx, y' = y + dy,
yaw' = wrap(yaw + dyaw), vx' = dx/dt, vy' = dy/dt.

Both admit exact closed-form inverses, which supply expert actions for
behaviour cloning from consecutive log states. Jacobians are the analytic
partial derivatives of the equations above and power the tape primitives
used during training; state and action inputs can each be differentiated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .core import (
    Action,
    AgentState,
    DynamicsKind,
    Scenario,
    SimState,
    wrap_yaw,
    yaw_diff,
)

SPEED_EPS_SQ = 1e-12  # inside the square root; floors the speed at 1e-6 m/s

# Per-step action clip ranges, applied inside step_env (zero gradient outside).
ACCEL_MAX = 6.0      # m/s^2
STEER_MAX = 0.3      # 1/m
DELTA_XY_MAX = 3.0   # m
DELTA_YAW_MAX = 0.3  # rad

_BOUNDS = {
    DynamicsKind.BICYCLE: np.array([ACCEL_MAX, STEER_MAX]),
    DynamicsKind.DELTA: np.array([DELTA_XY_MAX, DELTA_XY_MAX, DELTA_YAW_MAX]),
}


class StepRangeError(IndexError):
    """Attempted to step a sim state already at the end of its scenario."""


def action_bounds(kind: DynamicsKind) -> np.ndarray:
    """Symmetric per-component clip bounds for the given dynamics model."""
    return _BOUNDS[kind].copy()


def safe_speed(vx: float, vy: float) -> float:
    """Speed with an epsilon under the root, differentiable at standstill."""
    if not (math.isfinite(vx) and math.isfinite(vy)):
        raise ValueError(f"safe_speed: non-finite velocity ({vx!r}, {vy!r})")
    return math.sqrt(vx * vx + vy * vy + SPEED_EPS_SQ)


def clip_action(a: Action) -> Action:
    b = _BOUNDS[a.kind]
    return Action.from_vec(a.kind, np.clip(a.as_vec(), -b, b))


# -- vector kernels (pose = [x, y, yaw, vx, vy]) --------------------------------

def _step_bicycle_vec(p: np.ndarray, a: np.ndarray, dt: float) -> np.ndarray:
    x, y, yaw, vx, vy = p
    accel, steer = a
    v = safe_speed(vx, vy)
    new_yaw = wrap_yaw(yaw + v * steer * dt)
    new_v = v + accel * dt
    return np.array([
        x + v * math.cos(yaw) * dt,
        y + v * math.sin(yaw) * dt,
        new_yaw,
        new_v * math.cos(new_yaw),
        new_v * math.sin(new_yaw),
    ])


def _step_delta_vec(p: np.ndarray, a: np.ndarray, dt: float) -> np.ndarray:
    x, y, yaw, _, _ = p
    dx, dy, dyaw = a
    return np.array([x + dx, y + dy, wrap_yaw(yaw + dyaw), dx / dt, dy / dt])


def _jac_bicycle_vec(p: np.ndarray, a: np.ndarray, dt: float):
    """(d_state, d_action) for the bicycle step; rows x,y,yaw,vx,vy."""
    _, _, yaw, vx, vy = p
    accel, steer = a
    v = safe_speed(vx, vy)
    dv_dvx = vx / v
    dv_dvy = vy / v
    yaw_n = yaw + v * steer * dt  # pre-wrap; wrap has unit derivative
    cos_n, sin_n = math.cos(yaw_n), math.sin(yaw_n)
    cos_c, sin_c = math.cos(yaw), math.sin(yaw)
    v_n = v + accel * dt

    d_state = np.zeros((5, 5))
    d_state[0, 0] = 1.0
    d_state[0, 2] = -v * sin_c * dt
    d_state[0, 3] = dv_dvx * cos_c * dt
    d_state[0, 4] = dv_dvy * cos_c * dt
    d_state[1, 1] = 1.0
    d_state[1, 2] = v * cos_c * dt
    d_state[1, 3] = dv_dvx * sin_c * dt
    d_state[1, 4] = dv_dvy * sin_c * dt
    d_state[2, 2] = 1.0
    d_state[2, 3] = dv_dvx * steer * dt
    d_state[2, 4] = dv_dvy * steer * dt
    # vx' = (v + accel dt) cos(yaw + v steer dt), vy' analogous with sin.
    d_state[3, 2] = -v_n * sin_n
    d_state[3, 3] = dv_dvx * (cos_n - v_n * sin_n * steer * dt)
    d_state[3, 4] = dv_dvy * (cos_n - v_n * sin_n * steer * dt)
    d_state[4, 2] = v_n * cos_n
    d_state[4, 3] = dv_dvx * (sin_n + v_n * cos_n * steer * dt)
    d_state[4, 4] = dv_dvy * (sin_n + v_n * cos_n * steer * dt)

    d_action = np.zeros((5, 2))
    d_action[2, 1] = v * dt
    d_action[3, 0] = dt * cos_n
    d_action[3, 1] = -v_n * sin_n * v * dt
    d_action[4, 0] = dt * sin_n
    d_action[4, 1] = v_n * cos_n * v * dt
    return d_state, d_action


def _jac_delta_vec(p: np.ndarray, a: np.ndarray, dt: float):
    d_state = np.zeros((5, 5))
    d_state[0, 0] = 1.0
    d_state[1, 1] = 1.0
    d_state[2, 2] = 1.0
    d_action = np.zeros((5, 3))
    d_action[0, 0] = 1.0
    d_action[1, 1] = 1.0
    d_action[2, 2] = 1.0
    d_action[3, 0] = 1.0 / dt
    d_action[4, 1] = 1.0 / dt
    return d_state, d_action


_STEP_VEC = {DynamicsKind.BICYCLE: _step_bicycle_vec, DynamicsKind.DELTA: _step_delta_vec}
_JAC_VEC = {DynamicsKind.BICYCLE: _jac_bicycle_vec, DynamicsKind.DELTA: _jac_delta_vec}


def step_vec(kind: DynamicsKind, pose: np.ndarray, action: np.ndarray, dt: float) -> np.ndarray:
    """Advance a pose vector one step under the given dynamics model."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    pose = np.asarray(pose, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if not (np.all(np.isfinite(pose)) and np.all(np.isfinite(action))):
        raise ValueError("step: non-finite state or action")
    return _STEP_VEC[kind](pose, action, dt)


# -- AgentState-level operations -------------------------------------------------

def step_bicycle(s: AgentState, a: Action, dt: float) -> AgentState:
    if a.kind is not DynamicsKind.BICYCLE:
        raise ValueError(f"step_bicycle got a {a.kind.value} action")
    return s.with_pose(step_vec(DynamicsKind.BICYCLE, s.pose_vec(), a.as_vec(), dt))


def step_delta(s: AgentState, a: Action, dt: float) -> AgentState:
    if a.kind is not DynamicsKind.DELTA:
        raise ValueError(f"step_delta got a {a.kind.value} action")
    return s.with_pose(step_vec(DynamicsKind.DELTA, s.pose_vec(), a.as_vec(), dt))


def inverse_bicycle(s: AgentState, s_next: AgentState, dt: float) -> Action:
    """Recover (accel, steer) mapping s to s_next under the bicycle step.

    Exact for transitions produced by step_bicycle as long as the speed stays
    positive; at very low speeds the curvature estimate divides by the floored
    speed and may be large but stays finite.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    v = safe_speed(s.vx, s.vy)
    v_next = safe_speed(s_next.vx, s_next.vy)
    accel = (v_next - v) / dt
    steer = yaw_diff(s_next.yaw, s.yaw) / (v * dt)
    return Action.bicycle(accel, steer)


def inverse_delta(s: AgentState, s_next: AgentState) -> Action:
    """Recover (dx, dy, dyaw) mapping s to s_next under the delta step."""
    return Action.delta(s_next.x - s.x, s_next.y - s.y, yaw_diff(s_next.yaw, s.yaw))


def inverse_action(kind: DynamicsKind, s: AgentState, s_next: AgentState, dt: float) -> Action:
    if kind is DynamicsKind.BICYCLE:
        return inverse_bicycle(s, s_next, dt)
    return inverse_delta(s, s_next)


@dataclass(frozen=True)
class DynJacobian:
    """Analytic derivatives of one dynamics step for one agent.

    Rows are the next-state components (x, y, yaw, vx, vy); d_state_d_action
    has one column per action dimension, d_state_d_state is 5x5.
    """

    d_state_d_action: np.ndarray
    d_state_d_state: np.ndarray


def jacobian_bicycle(s: AgentState, a: Action, dt: float) -> DynJacobian:
    if a.kind is not DynamicsKind.BICYCLE:
        raise ValueError(f"jacobian_bicycle got a {a.kind.value} action")
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    d_state, d_action = _jac_bicycle_vec(s.pose_vec(), a.as_vec(), dt)
    return DynJacobian(d_action, d_state)


def jacobian_delta(s: AgentState, a: Action, dt: float) -> DynJacobian:
    if a.kind is not DynamicsKind.DELTA:
        raise ValueError(f"jacobian_delta got a {a.kind.value} action")
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    d_state, d_action = _jac_delta_vec(s.pose_vec(), a.as_vec(), dt)
    return DynJacobian(d_action, d_state)


# -- tape primitive --------------------------------------------------------------

def step_on_tape(tape: ad.Tape, kind: DynamicsKind, pose, action, dt: float) -> ad.Var:
    """Dynamics step as a custom tape primitive with Jacobian-based VJPs.

    pose and action may each be a Var (differentiated via the corresponding
    Jacobian block) or a plain array (treated as a constant, which is how the
    trainer detaches the previous simulator state).
    """
    pose_val = pose.value if isinstance(pose, ad.Var) else np.asarray(pose, dtype=np.float64)
    act_val = action.value if isinstance(action, ad.Var) else np.asarray(action, dtype=np.float64)
    out = step_vec(kind, pose_val, act_val, dt)
    parents = tuple(v for v in (pose, action) if isinstance(v, ad.Var))

    def vjp(g):
        d_state, d_action = _JAC_VEC[kind](pose_val, act_val, dt)
        grads = []
        if isinstance(pose, ad.Var):
            grads.append(d_state.T @ g)
        if isinstance(action, ad.Var):
            grads.append(d_action.T @ g)
        return tuple(grads)

    return tape.custom(f"step_{kind.value}", parents, out, vjp)


# -- full simulator step ----------------------------------------------------------

def step_env(
    s: SimState,
    actions: Sequence[Optional[Action]],
    scenario: Scenario,
    noise_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> SimState:
    """Advance the whole scene one step.

    Controlled agents move under the scenario's dynamics model with their
    actions clipped to the model's bounds; uncontrolled agents replay the log
    at t+1. With noise_sigma > 0, iid N(0, sigma^2) noise is added to each
    controlled agent's position after the dynamics step (draw order: agents in
    index order, x before y).
    """
    end = scenario.history_len + scenario.horizon
    if s.t >= end:
        raise StepRangeError(f"cannot step past t={end} (state is at t={s.t})")
    if noise_sigma < 0.0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if noise_sigma > 0.0 and rng is None:
        raise ValueError("noise_sigma > 0 requires an rng")
    if len(actions) != s.n_agents:
        raise ValueError(f"need {s.n_agents} action slots, got {len(actions)}")

    next_log = scenario.log.states[s.t + 1]
    new_agents = []
    new_valid = []
    for i in range(s.n_agents):
        if s.controlled[i]:
            a = actions[i]
            if a is None:
                raise ValueError(f"missing action for controlled agent {i}")
            if a.kind is not scenario.dynamics:
                raise ValueError(
                    f"agent {i}: {a.kind.value} action in a "
                    f"{scenario.dynamics.value} scenario"
                )
            pose = step_vec(
                scenario.dynamics, s.agents[i].pose_vec(), clip_action(a).as_vec(),
                scenario.dt,
            )
            if noise_sigma > 0.0:
                pose = pose.copy()
                pose[0] += noise_sigma * rng.standard_normal()
                pose[1] += noise_sigma * rng.standard_normal()
            new_agents.append(s.agents[i].with_pose(pose))
            new_valid.append(s.valid[i])
        else:
            new_agents.append(next_log.agents[i])
            new_valid.append(next_log.valid[i])
    return SimState(s.t + 1, tuple(new_agents), tuple(new_valid), s.controlled)
