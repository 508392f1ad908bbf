import math

import numpy as np
import pytest

from apgsim import autodiff as ad
from apgsim import dynamics as dyn
from apgsim.core import Action, AgentState, DynamicsKind, wrap_yaw
from conftest import make_line_scenario, rand_agent_state


def test_safe_speed_examples():
    assert dyn.safe_speed(3.0, 4.0) == pytest.approx(5.0, abs=1e-9)
    assert dyn.safe_speed(0.0, 0.0) == pytest.approx(1e-6, rel=1e-9)
    with pytest.raises(ValueError):
        dyn.safe_speed(math.nan, 0.0)


def test_safe_speed_gradient_at_rest_is_finite_zero():
    h = 1e-6
    for j in range(2):
        args_hi = [0.0, 0.0]
        args_lo = [0.0, 0.0]
        args_hi[j] += h
        args_lo[j] -= h
        fd = (dyn.safe_speed(*args_hi) - dyn.safe_speed(*args_lo)) / (2 * h)
        assert math.isfinite(fd)
        assert fd == pytest.approx(0.0, abs=1e-9)


def test_step_bicycle_examples():
    s = AgentState(0, 0, 0, 2, 0, 4, 2)
    out = dyn.step_bicycle(s, Action.bicycle(0.0, 0.0), 0.1)
    assert np.allclose(out.pose_vec(), [0.2, 0, 0, 2, 0], atol=1e-9)

    out = dyn.step_bicycle(s, Action.bicycle(1.0, 0.0), 0.1)
    assert np.allclose(out.pose_vec(), [0.2, 0, 0, 2.1, 0], atol=1e-9)

    out = dyn.step_bicycle(s, Action.bicycle(0.0, 0.5), 0.1)
    expect = [0.2, 0.0, 0.1, 2 * math.cos(0.1), 2 * math.sin(0.1)]
    assert np.allclose(out.pose_vec(), expect, atol=1e-9)


def test_step_delta_examples():
    s = AgentState(1, 1, 0, 9, 9, 4, 2)
    out = dyn.step_delta(s, Action.delta(0, 0, 0), 0.1)
    assert np.allclose(out.pose_vec(), [1, 1, 0, 0, 0])

    s2 = AgentState(0, 0, 0, 0, 0, 4, 2)
    out = dyn.step_delta(s2, Action.delta(0.3, 0.4, 0.1), 0.1)
    assert np.allclose(out.pose_vec(), [0.3, 0.4, 0.1, 3.0, 4.0])

    s3 = AgentState(0, 0, 3.1, 0, 0, 4, 2)
    out = dyn.step_delta(s3, Action.delta(0, 0, 0.1), 0.1)
    assert out.yaw == pytest.approx(3.2 - 2 * math.pi, abs=1e-12)


def test_kind_mismatch_rejected():
    s = AgentState(0, 0, 0, 1, 0, 4, 2)
    with pytest.raises(ValueError):
        dyn.step_bicycle(s, Action.delta(0, 0, 0), 0.1)
    with pytest.raises(ValueError):
        dyn.step_delta(s, Action.bicycle(0, 0), 0.1)
    with pytest.raises(ValueError):
        dyn.step_bicycle(s, Action.bicycle(0, 0), 0.0)


def test_inverse_bicycle_round_trip():
    s = AgentState(0, 0, 0, 2, 0, 4, 2)
    a = Action.bicycle(1.0, 0.5)
    nxt = dyn.step_bicycle(s, a, 0.1)
    rec = dyn.inverse_bicycle(s, nxt, 0.1)
    assert rec.accel == pytest.approx(1.0, abs=1e-8)
    assert rec.steer == pytest.approx(0.5, abs=1e-8)

    same = dyn.inverse_bicycle(s, s, 0.1)
    assert same.accel == pytest.approx(0.0, abs=1e-8)
    assert same.steer == pytest.approx(0.0, abs=1e-8)


def test_inverse_bicycle_random_round_trips():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        speed = rng.uniform(0.5, 20)
        yaw = rng.uniform(-3, 3)
        s = AgentState(
            rng.uniform(-10, 10), rng.uniform(-10, 10), yaw,
            speed * math.cos(yaw), speed * math.sin(yaw), 4, 2,
        )
        a = Action.bicycle(rng.uniform(-6, 6), rng.uniform(-0.3, 0.3))
        dt = 0.1
        nxt = dyn.step_bicycle(s, a, dt)
        rec = dyn.inverse_bicycle(s, nxt, dt)
        worst = max(worst, abs(rec.accel - a.accel), abs(rec.steer - a.steer))
    assert worst < 1e-8


def test_inverse_delta_examples():
    s = AgentState(1, 2, 0.5, 0, 0, 4, 2)
    assert np.allclose(dyn.inverse_delta(s, s).as_vec(), [0, 0, 0])

    rng = np.random.default_rng(1)
    for _ in range(200):
        st = rand_agent_state(rng)
        a = Action.delta(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-0.3, 0.3))
        nxt = dyn.step_delta(st, a, 0.1)
        rec = dyn.inverse_delta(st, nxt)
        assert np.allclose(rec.as_vec(), a.as_vec(), atol=1e-12)

    lo = AgentState(0, 0, -3.0, 0, 0, 4, 2)
    hi = AgentState(0, 0, 3.0, 0, 0, 4, 2)
    assert dyn.inverse_delta(lo, hi).dyaw == pytest.approx(6.0 - 2 * math.pi, abs=1e-12)
    assert dyn.inverse_delta(lo, hi).dyaw == pytest.approx(-0.2832, abs=1e-4)


def _fd_jacobian(kind, pose, act, dt, h=1e-6):
    js = np.zeros((5, 5))
    for j in range(5):
        hi, lo = pose.copy(), pose.copy()
        hi[j] += h
        lo[j] -= h
        js[:, j] = (dyn.step_vec(kind, hi, act, dt) - dyn.step_vec(kind, lo, act, dt)) / (2 * h)
    ja = np.zeros((5, len(act)))
    for j in range(len(act)):
        hi, lo = act.copy(), act.copy()
        hi[j] += h
        lo[j] -= h
        ja[:, j] = (dyn.step_vec(kind, pose, hi, dt) - dyn.step_vec(kind, pose, lo, dt)) / (2 * h)
    return js, ja


def _assert_jac_close(analytic, fd):
    small = np.abs(analytic) < 1e-3
    assert np.all(np.abs(analytic - fd)[small] < 1e-7)
    if (~small).any():
        rel = np.abs(analytic - fd)[~small] / np.abs(analytic[~small])
        assert rel.max() < 1e-5


def test_jacobian_bicycle_linear_terms():
    s = AgentState(0, 0, 0, 2, 0, 4, 2)
    jac = dyn.jacobian_bicycle(s, Action.bicycle(0.3, 0.1), 0.1)
    # d(new speed)/d(accel) = dt; speed is the norm of the (vx, vy) rows
    dv = np.hypot(jac.d_state_d_action[3, 0], jac.d_state_d_action[4, 0])
    assert dv == pytest.approx(0.1, rel=1e-9)
    assert jac.d_state_d_action[2, 1] == pytest.approx(2 * 0.1, rel=1e-9)


def test_jacobian_bicycle_spec_point():
    pose = np.array([0.3, -1.2, 0.7, 1.5, 0.9])
    act = np.array([0.8, -0.2])
    js, ja = dyn._jac_bicycle_vec(pose, act, 0.1)
    fs, fa = _fd_jacobian(DynamicsKind.BICYCLE, pose, act, 0.1)
    _assert_jac_close(js, fs)
    _assert_jac_close(ja, fa)


def test_jacobian_delta_constants():
    s = AgentState(0, 0, 0, 1, 1, 4, 2)
    jac = dyn.jacobian_delta(s, Action.delta(0.1, 0.1, 0.0), 0.1)
    assert jac.d_state_d_action[0, 0] == 1.0
    assert jac.d_state_d_action[3, 0] == pytest.approx(10.0)
    assert jac.d_state_d_action[2, 2] == 1.0


def test_jacobians_match_finite_differences_randomly():
    rng = np.random.default_rng(4)
    for kind in (DynamicsKind.BICYCLE, DynamicsKind.DELTA):
        adim = 2 if kind is DynamicsKind.BICYCLE else 3
        for n in range(300):
            pose = np.array([
                rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-3, 3),
                rng.uniform(-12, 12), rng.uniform(-12, 12),
            ])
            if n % 10 == 0:
                pose[3] = pose[4] = 0.0  # standstill must stay finite
            if kind is DynamicsKind.BICYCLE:
                act = np.array([rng.uniform(-6, 6), rng.uniform(-0.3, 0.3)])
            else:
                act = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-0.3, 0.3)])
            dt = float(rng.choice([0.05, 0.1, 0.2]))
            js, ja = dyn._JAC_VEC[kind](pose, act, dt)
            assert np.all(np.isfinite(js)) and np.all(np.isfinite(ja))
            fs, fa = _fd_jacobian(kind, pose, act, dt)
            _assert_jac_close(js, fs)
            _assert_jac_close(ja, fa)


def test_yaw_seam_continuity():
    # stepping from just below +pi and just above -pi must agree in (cos, sin)
    for delta in (1e-3, 1e-6, 1e-9):
        a = AgentState(0, 0, math.pi - delta, 2, 0, 4, 2)
        b = AgentState(0, 0, -math.pi + delta, 2, 0, 4, 2)
        act = Action.bicycle(0.5, 0.2)
        sa = dyn.step_bicycle(a, act, 0.1)
        sb = dyn.step_bicycle(b, act, 0.1)
        gap = math.hypot(
            math.cos(sa.yaw) - math.cos(sb.yaw), math.sin(sa.yaw) - math.sin(sb.yaw)
        )
        assert gap < 3 * delta + 1e-12


def test_step_on_tape_matches_kernels_and_jacobians():
    rng = np.random.default_rng(9)
    for kind in (DynamicsKind.BICYCLE, DynamicsKind.DELTA):
        adim = 2 if kind is DynamicsKind.BICYCLE else 3
        pose = np.array([1.0, -2.0, 0.3, 3.0, 1.0])
        act = rng.uniform(-0.2, 0.2, adim)
        tape = ad.Tape()
        a_var = tape.leaf(act)
        p_var = tape.leaf(pose)
        out = dyn.step_on_tape(tape, kind, p_var, a_var, 0.1)
        assert np.allclose(out.value, dyn.step_vec(kind, pose, act, 0.1))
        w = rng.normal(size=5)
        g = tape.backward(ad.sum_(out * tape.leaf(w)))
        js, ja = dyn._JAC_VEC[kind](pose, act, 0.1)
        assert np.allclose(ad.grad_of(g, a_var), ja.T @ w)
        assert np.allclose(ad.grad_of(g, p_var), js.T @ w)

        # detached state contributes nothing
        tape2 = ad.Tape()
        a2 = tape2.leaf(act)
        out2 = dyn.step_on_tape(tape2, kind, pose, a2, 0.1)
        g2 = tape2.backward(ad.sum_(out2 * tape2.leaf(w)))
        assert np.allclose(ad.grad_of(g2, a2), ja.T @ w)


def test_step_env_reduces_to_kernel():
    scen = make_line_scenario(n_agents=1, dynamics=DynamicsKind.BICYCLE)
    s = scen.init
    a = Action.bicycle(0.5, 0.1)
    out = dyn.step_env(s, [a], scen)
    expect = dyn.step_bicycle(s.agents[0], a, scen.dt)
    assert out.agents[0] == expect
    assert out.t == s.t + 1


def test_step_env_pure_playback():
    scen = make_line_scenario(n_agents=2, controlled=(False, False))
    s = scen.init
    out = dyn.step_env(s, [None, None], scen)
    assert out.agents == scen.log.states[s.t + 1].agents
    assert out.valid == scen.log.states[s.t + 1].valid


def test_step_env_noise_seeded_and_reproducible():
    scen = make_line_scenario(n_agents=1)
    s = scen.init
    a = Action.bicycle(0.0, 0.0)
    base = dyn.step_env(s, [a], scen)
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(123)
        outs.append(dyn.step_env(s, [a], scen, noise_sigma=0.1, rng=rng))
    assert outs[0].agents[0] == outs[1].agents[0]
    rng = np.random.default_rng(123)
    dx = 0.1 * rng.standard_normal()
    dy = 0.1 * rng.standard_normal()
    assert outs[0].agents[0].x == pytest.approx(base.agents[0].x + dx)
    assert outs[0].agents[0].y == pytest.approx(base.agents[0].y + dy)


def test_step_env_errors():
    scen = make_line_scenario(n_agents=1, horizon=3)
    end_state = scen.log.states[-1]
    with pytest.raises(dyn.StepRangeError):
        dyn.step_env(end_state, [Action.bicycle(0, 0)], scen)
    with pytest.raises(ValueError):
        dyn.step_env(scen.init, [None], scen)  # missing action for controlled agent
    with pytest.raises(ValueError):
        dyn.step_env(scen.init, [Action.delta(0, 0, 0)], scen)  # wrong kind
    with pytest.raises(ValueError):
        dyn.step_env(scen.init, [Action.bicycle(0, 0)], scen, noise_sigma=0.1, rng=None)
    with pytest.raises(ValueError):
        dyn.step_env(scen.init, [Action.bicycle(0, 0)], scen, noise_sigma=-0.1)


def test_step_env_deterministic_without_noise():
    scen = make_line_scenario(n_agents=2, controlled=(True, False))
    a = Action.bicycle(0.3, -0.05)
    o1 = dyn.step_env(scen.init, [a, None], scen)
    o2 = dyn.step_env(scen.init, [a, None], scen)
    assert o1 == o2


def test_clip_action_bounds():
    a = dyn.clip_action(Action.bicycle(100.0, -100.0))
    assert (a.accel, a.steer) == (6.0, -0.3)
    d = dyn.clip_action(Action.delta(5.0, -5.0, 1.0))
    assert (d.dx, d.dy, d.dyaw) == (3.0, -3.0, 0.3)
