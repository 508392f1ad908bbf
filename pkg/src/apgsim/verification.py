"""Gradient-check suite: every autodiff primitive against central differences,
both dynamics Jacobians (including zero-velocity inputs), and an end-to-end
finite-difference check of a short teacher-forced training rollout.

The end-to-end check runs with per-step time resets and the hidden state kept
across resets: snapped states make the (detached) state and observation paths
genuinely constant, so the tape gradient and a full re-roll finite difference
measure the same function while the GRU still carries gradients across steps.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from . import scenario_io as sio
from . import trainer as tr
from .core import DynamicsKind
from .policy import PolicyParams, PolicySizes

PRIMITIVE_TOL = 1e-5
JACOBIAN_REL_TOL = 1e-5
JACOBIAN_ABS_TOL = 1e-7   # for entries with |analytic| < 1e-3
JACOBIAN_SMALL = 1e-3
END_TO_END_TOL = 1e-4
END_TO_END_SMALL = 1e-5   # gradient entries below this use an absolute tolerance
END_TO_END_ABS_TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    max_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.threshold

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_err={self.max_err:.3e} tol={self.threshold:.0e}"


@dataclass
class SuiteResult:
    checks: list
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def text(self) -> str:
        lines = [c.line() for c in self.checks]
        lines.append(f"{'PASS' if self.passed else 'FAIL'} ({self.elapsed_s:.1f}s)")
        return "\n".join(lines) + "\n"


def _scalar(v, w):
    return ad.sum_(v * v.tape.leaf(w))


def _check_primitives(rng: np.random.Generator, points: int = 100) -> list:
    """grad_check each primitive at `points` random inputs."""

    def pair():
        return rng.uniform(-2.0, 2.0, size=(3,)), rng.uniform(-2.0, 2.0, size=(3,))

    cases = {
        "add": lambda: (lambda t, vs: _scalar(ad.add(vs[0], vs[1]), w), list(pair())),
        "sub": lambda: (lambda t, vs: _scalar(ad.sub(vs[0], vs[1]), w), list(pair())),
        "mul": lambda: (lambda t, vs: _scalar(ad.mul(vs[0], vs[1]), w), list(pair())),
        "neg": lambda: (lambda t, vs: _scalar(ad.neg(vs[0]), w3), [rng.uniform(-2, 2, (3,))]),
        "matmul": lambda: (
            lambda t, vs: _scalar(ad.matmul(vs[0], vs[1]), w23),
            [rng.uniform(-1, 1, (2, 4)), rng.uniform(-1, 1, (4, 3))],
        ),
        "matmul_vec": lambda: (
            lambda t, vs: _scalar(ad.matmul(vs[0], vs[1]), w2a),
            [rng.uniform(-1, 1, (2, 4)), rng.uniform(-1, 1, (4,))],
        ),
        "tanh": lambda: (lambda t, vs: _scalar(ad.tanh(vs[0]), w3), [rng.uniform(-2, 2, (3,))]),
        "sigmoid": lambda: (lambda t, vs: _scalar(ad.sigmoid(vs[0]), w3), [rng.uniform(-2, 2, (3,))]),
        "exp": lambda: (lambda t, vs: _scalar(ad.exp(vs[0]), w3), [rng.uniform(-2, 1, (3,))]),
        "log": lambda: (lambda t, vs: _scalar(ad.log(vs[0]), w3), [rng.uniform(0.2, 3, (3,))]),
        "softmax": lambda: (lambda t, vs: _scalar(ad.softmax(vs[0]), w3), [rng.uniform(-2, 2, (3,))]),
        "softmax2d": lambda: (
            lambda t, vs: _scalar(ad.softmax(vs[0], axis=-1), w23),
            [rng.uniform(-2, 2, (2, 3))],
        ),
        "concat": lambda: (
            lambda t, vs: _scalar(ad.concat([vs[0], vs[1]]), w6),
            [rng.uniform(-2, 2, (3,)), rng.uniform(-2, 2, (3,))],
        ),
        "slice": lambda: (lambda t, vs: _scalar(vs[0][1:3], w2), [rng.uniform(-2, 2, (4,))]),
        "stack": lambda: (
            lambda t, vs: _scalar(ad.stack([vs[0], vs[1]]), w23),
            [rng.uniform(-2, 2, (3,)), rng.uniform(-2, 2, (3,))],
        ),
        "transpose": lambda: (
            lambda t, vs: _scalar(ad.transpose(vs[0]), w32),
            [rng.uniform(-2, 2, (2, 3))],
        ),
        "sum": lambda: (lambda t, vs: ad.sum_(vs[0]), [rng.uniform(-2, 2, (2, 3))]),
        "sum_axis": lambda: (lambda t, vs: _scalar(ad.sum_(vs[0], axis=0), w3), [rng.uniform(-2, 2, (2, 3))]),
        "mean": lambda: (lambda t, vs: ad.mean(vs[0]), [rng.uniform(-2, 2, (2, 3))]),
        "mean_axis": lambda: (lambda t, vs: _scalar(ad.mean(vs[0], axis=0), w3), [rng.uniform(-2, 2, (2, 3))]),
        "l2_norm": lambda: (lambda t, vs: ad.l2_norm(vs[0]), [rng.uniform(-2, 2, (3,))]),
        "l2_norm_zero": lambda: (lambda t, vs: ad.l2_norm(vs[0]), [np.zeros(3)]),
        "atan2": lambda: (lambda t, vs: _scalar(ad.atan2(vs[0], vs[1]), w3),
                          [rng.uniform(0.3, 2, (3,)) * rng.choice([-1, 1], 3),
                           rng.uniform(0.3, 2, (3,)) * rng.choice([-1, 1], 3)]),
        "sqrt_eps": lambda: (lambda t, vs: _scalar(ad.sqrt_eps(vs[0]), w3), [rng.uniform(0.0, 4, (3,))]),
        "clamp": lambda: (lambda t, vs: _scalar(ad.clamp(vs[0], -1.5, 1.5), w3),
                          [rng.uniform(-1.2, 1.2, (3,))]),
    }
    # detach is deliberately absent: finite differences measure the value path
    # it cuts, so its contract is asserted by dedicated unit tests instead.

    results = []
    for name, make in cases.items():
        worst = 0.0
        for _ in range(points):
            w = rng.uniform(0.5, 1.5, (3,))
            w2 = rng.uniform(0.5, 1.5, (2,))
            w3 = rng.uniform(0.5, 1.5, (3,))
            w6 = rng.uniform(0.5, 1.5, (6,))
            w23 = rng.uniform(0.5, 1.5, (2, 3))
            w32 = rng.uniform(0.5, 1.5, (3, 2))
            w2a = rng.uniform(0.5, 1.5, (2,))
            f, inputs = make()
            worst = max(worst, ad.grad_check(f, inputs))
        results.append(CheckResult(f"primitive/{name}", worst, PRIMITIVE_TOL))
    return results


def _check_jacobian(kind: DynamicsKind, rng: np.random.Generator,
                    corrupt: bool, samples: int = 1000) -> list:
    """Analytic Jacobians vs central differences at h=1e-6.

    Entries with |analytic| < 1e-3 are held to an absolute tolerance, the rest
    to a relative one. Every 20th sample forces zero velocity.
    """
    h = 1e-6
    max_rel = 0.0
    max_abs = 0.0
    jac_fn = dyn._JAC_VEC[kind]
    a_dim = 2 if kind is DynamicsKind.BICYCLE else 3
    for n in range(samples):
        pose = np.array([
            rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-3.0, 3.0),
            rng.uniform(-15, 15), rng.uniform(-15, 15),
        ])
        if n % 20 == 0:
            pose[3] = pose[4] = 0.0
        if kind is DynamicsKind.BICYCLE:
            act = np.array([rng.uniform(-6, 6), rng.uniform(-0.3, 0.3)])
        else:
            act = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-0.3, 0.3)])
        dt = float(rng.choice([0.05, 0.1, 0.2]))
        d_state, d_action = jac_fn(pose, act, dt)
        if corrupt:
            d_action = d_action.copy()
            d_action[0, 0] += 1e-3
        for which, analytic, dim in (("state", d_state, 5), ("action", d_action, a_dim)):
            for j in range(dim):
                if which == "state":
                    p_hi, p_lo = pose.copy(), pose.copy()
                    p_hi[j] += h
                    p_lo[j] -= h
                    fd = (dyn.step_vec(kind, p_hi, act, dt)
                          - dyn.step_vec(kind, p_lo, act, dt)) / (2 * h)
                else:
                    a_hi, a_lo = act.copy(), act.copy()
                    a_hi[j] += h
                    a_lo[j] -= h
                    fd = (dyn.step_vec(kind, pose, a_hi, dt)
                          - dyn.step_vec(kind, pose, a_lo, dt)) / (2 * h)
                diff = np.abs(analytic[:, j] - fd)
                small = np.abs(analytic[:, j]) < JACOBIAN_SMALL
                if small.any():
                    max_abs = max(max_abs, float(diff[small].max()))
                if (~small).any():
                    rel = diff[~small] / np.abs(analytic[:, j][~small])
                    max_rel = max(max_rel, float(rel.max()))
    name = f"jacobian_{kind.value}"
    return [
        CheckResult(f"{name}/relative", max_rel, JACOBIAN_REL_TOL),
        CheckResult(f"{name}/small_abs", max_abs, JACOBIAN_ABS_TOL),
    ]


def _check_end_to_end(seed: int) -> list:
    """Finite differences over every policy parameter of a 3-step rollout.

    Teacher-forced (time resets every step) with the hidden state kept, so the
    re-rolled loss depends on the parameters exactly through the paths the
    tape records. Mirroring the Jacobian comparator, near-zero gradient entries
    (below 1e-5 on a loss of order 0.1) are held to an absolute tolerance,
    since central differences bottom out around 1e-11 there.
    """
    sizes = PolicySizes(hidden=8, k_road=4, k_agent=2, m_queries=2, obs_radius=30.0)
    scen = sio.generate(sio.GenSpec(
        n_scenarios=1, n_agents=1, horizon=3, history_len=2, seed=3 + seed,
    ))[0]
    config = tr.TrainConfig(
        mode="apg", sizes=sizes, seed=seed,
        reset=tr.ResetPolicy.time(1), hidden_reset="keep",
    )
    params = PolicyParams.init(sizes, 2, seed=seed)

    def loss_of():
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF0]))
        rec, _ = tr.rollout_apg(scen, params, config, rng, need_grads=False)
        return float(np.mean(rec.step_losses))

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF0]))
    _, grads = tr.rollout_apg(scen, params, config, rng)

    h = 1e-5
    worst_rel = 0.0
    worst_abs = 0.0
    for name, arr in params.tensors.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + h
            fp = loss_of()
            flat[c] = orig - h
            fm = loss_of()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = gflat[c]
            if abs(a) < END_TO_END_SMALL:
                worst_abs = max(worst_abs, abs(a - numeric))
            else:
                worst_rel = max(
                    worst_rel, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                )
    return [
        CheckResult("end_to_end/relative", worst_rel, END_TO_END_TOL),
        CheckResult("end_to_end/small_abs", worst_abs, END_TO_END_ABS_TOL),
    ]


def run_gradient_suite(seed: int = 0, corrupt: str = None) -> SuiteResult:
    """Full gradient verification; corrupt in {"bicycle", "delta"} injects a
    deliberate Jacobian fault so the failure path can be exercised."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
    checks = _check_primitives(rng)
    for kind in (DynamicsKind.BICYCLE, DynamicsKind.DELTA):
        checks.extend(_check_jacobian(kind, rng, corrupt == kind.value))
    checks.extend(_check_end_to_end(seed))
    return SuiteResult(checks, time.perf_counter() - t0)
