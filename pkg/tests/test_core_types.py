import math

import numpy as np
import pytest

from apgsim.core import (
    Action,
    AgentState,
    DynamicsKind,
    Polyline,
    SimState,
    Trajectory,
    wrap_yaw,
    yaw_diff,
)
from conftest import make_line_scenario


def test_wrap_yaw_examples():
    assert wrap_yaw(0.0) == 0.0
    assert wrap_yaw(3 * math.pi) == pytest.approx(-math.pi, abs=1e-12)
    assert wrap_yaw(2.5 * math.pi) == pytest.approx(0.5 * math.pi, abs=1e-12)
    assert wrap_yaw(math.pi) == -math.pi


def test_wrap_yaw_rejects_non_finite():
    for bad in (math.inf, -math.inf, math.nan):
        with pytest.raises(ValueError):
            wrap_yaw(bad)


def test_wrap_yaw_range_and_trig_identity():
    rng = np.random.default_rng(0)
    angles = np.concatenate([
        rng.uniform(-10, 10, 300),
        rng.uniform(-1e4, 1e4, 300),
        [1e8, -1e8, 6.25, -6.25],
    ])
    for a in angles:
        w = wrap_yaw(float(a))
        assert -math.pi <= w < math.pi
        assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-12)
        assert math.sin(w) == pytest.approx(math.sin(a), abs=1e-12)


def test_yaw_diff_examples():
    assert yaw_diff(0.1, 0.1) == 0.0
    assert yaw_diff(math.pi - 0.1, -math.pi + 0.1) == pytest.approx(-0.2, abs=1e-12)
    assert yaw_diff(1.0, 0.25) == pytest.approx(0.75, abs=1e-12)


def test_yaw_diff_antisymmetry():
    rng = np.random.default_rng(1)
    for _ in range(300):
        a, b = rng.uniform(-math.pi, math.pi, 2)
        d = yaw_diff(a, b)
        if d != -math.pi and yaw_diff(b, a) != -math.pi:
            assert d == pytest.approx(-yaw_diff(b, a), abs=1e-12)


def test_agent_state_invariants():
    s = AgentState(1, 2, 0.5, 3, 4, 4.5, 2.0)
    assert s.speed() == pytest.approx(5.0)
    with pytest.raises(ValueError):
        AgentState(0, 0, 4.0, 0, 0, 4.5, 2.0)  # yaw outside [-pi, pi)
    with pytest.raises(ValueError):
        AgentState(0, 0, 0.0, 0, 0, -1.0, 2.0)
    with pytest.raises(ValueError):
        AgentState(0, 0, 0.0, 0, 0, 4.5, 0.0)
    with pytest.raises(ValueError):
        AgentState(math.nan, 0, 0.0, 0, 0, 4.5, 2.0)
    # -pi itself is inside the half-open interval
    AgentState(0, 0, -math.pi, 0, 0, 1, 1)


def test_agent_state_pose_round_trip():
    s = AgentState(1, 2, 0.5, 3, 4, 4.5, 2.0)
    s2 = s.with_pose(s.pose_vec())
    assert s == s2


def test_action_kinds():
    b = Action.bicycle(1.0, 0.1)
    assert b.accel == 1.0 and b.steer == 0.1
    d = Action.delta(0.5, -0.5, 0.05)
    assert (d.dx, d.dy, d.dyaw) == (0.5, -0.5, 0.05)
    with pytest.raises(ValueError):
        b.dx  # bicycle action has no delta components
    with pytest.raises(ValueError):
        Action(DynamicsKind.BICYCLE, (1.0, 2.0, 3.0))
    with pytest.raises(ValueError):
        Action.bicycle(math.inf, 0.0)
    assert np.allclose(Action.from_vec(DynamicsKind.DELTA, [1, 2, 0.1]).as_vec(), [1, 2, 0.1])


def test_sim_state_invariants():
    a = AgentState(0, 0, 0, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        SimState(0, (), (), ())
    with pytest.raises(ValueError):
        SimState(0, (a,), (True, True), (True,))
    with pytest.raises(ValueError):
        SimState(-1, (a,), (True,), (True,))
    s = SimState(3, (a, a), (True, False), (False, True))
    assert s.n_agents == 2
    assert s.controlled_indices() == [1]


def test_trajectory_invariants():
    a = AgentState(0, 0, 0, 0, 0, 1, 1)
    s0 = SimState(0, (a,), (True,), (True,))
    s1 = SimState(1, (a,), (True,), (True,))
    s3 = SimState(3, (a,), (True,), (True,))
    Trajectory((s0, s1), 0.1)
    with pytest.raises(ValueError):
        Trajectory((s0, s3), 0.1)
    with pytest.raises(ValueError):
        Trajectory((s0, s1), 0.0)


def test_scenario_invariants():
    scen = make_line_scenario(history=2, horizon=6)
    assert len(scen.log) == 9
    assert scen.init is scen.log.states[2]
    assert scen.dt == 0.1
    assert scen.road_points.shape[1] == 2
    assert scen.road_half_widths.shape[0] == scen.road_points.shape[0]
    with pytest.raises(ValueError):
        make_line_scenario(history=2, horizon=0)
    with pytest.raises(ValueError):
        Polyline(np.array([[0.0, 0.0]]), 1.0)
    with pytest.raises(ValueError):
        Polyline(np.array([[0.0, 0.0], [1.0, 0.0]]), 0.0)
