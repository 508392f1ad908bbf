"""Recurrent stochastic policy: ego-frame observations, per-agent encoder,
learned-query agent mixer, GRU, and a reparametrized Gaussian action head.

Observations are always built from detached state values (plain arrays), so
gradients never flow through the observation path; they reach earlier steps
only through the GRU hidden state and, within a step, through the dynamics
Jacobians.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from .core import ACTION_ARITY, Action, DynamicsKind, Scenario, SimState, Trajectory

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
LOG_STD_INIT = -1.0


@dataclass(frozen=True)
class PolicySizes:
    """Architecture and observation sizes; defaults are desk-scale."""

    hidden: int = 64
    k_road: int = 32
    k_agent: int = 8
    m_queries: int = 4
    obs_radius: float = 50.0

    @property
    def road_feat(self) -> int:
        return 4 * self.k_road  # rel x, rel y, half-width, valid

    @property
    def agent_feat(self) -> int:
        return 9 * self.k_agent  # rel x/y, cos/sin rel yaw, rel vx/vy, extents, valid

    @property
    def obs_dim(self) -> int:
        return self.road_feat + self.agent_feat + 1  # + own speed


def _rot_into_frame(vecs: np.ndarray, yaw: float) -> np.ndarray:
    """Rotate world-frame (..., 2) vectors into a frame heading along yaw."""
    c, s = math.cos(yaw), math.sin(yaw)
    out = np.empty_like(vecs)
    out[..., 0] = c * vecs[..., 0] + s * vecs[..., 1]
    out[..., 1] = -s * vecs[..., 0] + c * vecs[..., 1]
    return out


def build_observation(
    state: SimState, scenario: Scenario, agent_idx: int, sizes: PolicySizes
) -> np.ndarray:
    """Fixed-width ego-frame feature vector for one controlled agent.

    Nearest k_road roadgraph points and nearest k_agent valid neighbours within
    obs_radius, selected by Euclidean distance with stable lower-index
    tie-break, each padded with zeros and a trailing validity flag. Relative
    neighbour velocity is (v_other - v_own) rotated into the ego frame. Raw
    units (meters, m/s); scaling to network range happens inside encode.
    """
    if not state.valid[agent_idx] or not state.controlled[agent_idx]:
        raise ValueError(f"agent {agent_idx} must be valid and controlled")
    me = state.agents[agent_idx]
    pos = np.array([me.x, me.y])

    road = np.zeros((sizes.k_road, 4))
    rel = scenario.road_points - pos
    dist = np.hypot(rel[:, 0], rel[:, 1])
    inside = dist <= sizes.obs_radius
    if inside.any():
        idx = np.flatnonzero(inside)
        order = idx[np.argsort(dist[idx], kind="stable")][: sizes.k_road]
        rotated = _rot_into_frame(rel[order], me.yaw)
        n = len(order)
        road[:n, 0:2] = rotated
        road[:n, 2] = scenario.road_half_widths[order]
        road[:n, 3] = 1.0

    agents = np.zeros((sizes.k_agent, 9))
    others = [
        i for i in range(state.n_agents)
        if i != agent_idx and state.valid[i]
    ]
    if others:
        opos = np.array([[state.agents[i].x, state.agents[i].y] for i in others])
        orel = opos - pos
        odist = np.hypot(orel[:, 0], orel[:, 1])
        keep = np.flatnonzero(odist <= sizes.obs_radius)
        order = keep[np.argsort(odist[keep], kind="stable")][: sizes.k_agent]
        for row, j in enumerate(order):
            o = state.agents[others[j]]
            rxy = _rot_into_frame(orel[j], me.yaw)
            dyaw = o.yaw - me.yaw
            rv = _rot_into_frame(np.array([o.vx - me.vx, o.vy - me.vy]), me.yaw)
            agents[row] = [
                rxy[0], rxy[1], math.cos(dyaw), math.sin(dyaw),
                rv[0], rv[1], o.length, o.width, 1.0,
            ]

    own_speed = dyn.safe_speed(me.vx, me.vy)
    return np.concatenate([road.reshape(-1), agents.reshape(-1), [own_speed]])


def observation_scale(sizes: PolicySizes) -> np.ndarray:
    """Per-feature normalization applied before the encoder MLP."""
    r = 1.0 / sizes.obs_radius
    road = np.tile([r, r, 1.0 / 5.0, 1.0], sizes.k_road)
    agent = np.tile([r, r, 1.0, 1.0, 1.0 / 15.0, 1.0 / 15.0, 1.0 / 5.0, 1.0 / 3.0, 1.0],
                    sizes.k_agent)
    return np.concatenate([road, agent, [1.0 / 15.0]])


# -- parameters and checkpoints ---------------------------------------------------

CHECKPOINT_MAGIC = b"APGPOL1\x00"


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the expected schema."""


def write_tensors(path, tensors: dict) -> None:
    """Write named float64 tensors: magic, name/shape table, little-endian data."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensors(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a policy checkpoint")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated header")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    (count,) = take("<I")
    shapes = []
    for _ in range(count):
        (nlen,) = take("<H")
        if off + nlen > len(data):
            raise CheckpointError(f"{path}: truncated name table")
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = take("<B")
        shape = tuple(take("<" + "I" * ndim)) if ndim else ()
        shapes.append((name, shape))
    tensors = {}
    for name, shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if off + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated tensor data for {name!r}")
        tensors[name] = np.frombuffer(
            data, dtype="<f8", count=n, offset=off
        ).astype(np.float64).reshape(shape)
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return tensors


class PolicyParams:
    """Named parameter tensors for one policy, in a fixed order."""

    def __init__(self, sizes: PolicySizes, action_dim: int, tensors: dict):
        self.sizes = sizes
        self.action_dim = action_dim
        self.tensors = tensors

    @staticmethod
    def _shapes(sizes: PolicySizes, action_dim: int) -> dict:
        h, d, m = sizes.hidden, sizes.obs_dim, sizes.m_queries
        a = action_dim
        return {
            "enc_w1": (h, d), "enc_b1": (h,),
            "enc_w2": (h, h), "enc_b2": (h,),
            "mix_wq": (h, h), "mix_wk": (h, h), "mix_wv": (h, h),
            "mix_queries": (m, h), "mix_wk2": (h, h), "mix_wv2": (h, h),
            "mix_wo": (h, 2 * h), "mix_bo": (h,),
            "gru_wz": (h, 2 * h), "gru_bz": (h,),
            "gru_wr": (h, 2 * h), "gru_br": (h,),
            "gru_wh": (h, 2 * h), "gru_bh": (h,),
            "head_w_mu": (a, h), "head_b_mu": (a,),
            "head_log_std": (a,),
        }

    @staticmethod
    def init(sizes: PolicySizes, action_dim: int, seed: int) -> "PolicyParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; log_std starts at -1."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A1]))
        h, d = sizes.hidden, sizes.obs_dim
        fan_in = {
            "enc_w1": d, "enc_b1": d, "enc_w2": h, "enc_b2": h,
            "mix_wq": h, "mix_wk": h, "mix_wv": h, "mix_queries": h,
            "mix_wk2": h, "mix_wv2": h, "mix_wo": 2 * h, "mix_bo": 2 * h,
            "gru_wz": 2 * h, "gru_bz": 2 * h, "gru_wr": 2 * h, "gru_br": 2 * h,
            "gru_wh": 2 * h, "gru_bh": 2 * h,
            "head_w_mu": h, "head_b_mu": h,
        }
        tensors = {}
        for name, shape in PolicyParams._shapes(sizes, action_dim).items():
            if name == "head_log_std":
                tensors[name] = np.full(shape, LOG_STD_INIT)
            else:
                bound = 1.0 / math.sqrt(fan_in[name])
                tensors[name] = rng.uniform(-bound, bound, size=shape)
        return PolicyParams(sizes, action_dim, tensors)

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.sizes, self.action_dim, {k: v.copy() for k, v in self.tensors.items()}
        )

    def clamp_log_std(self) -> None:
        np.clip(
            self.tensors["head_log_std"], LOG_STD_MIN, LOG_STD_MAX,
            out=self.tensors["head_log_std"],
        )

    def assert_finite(self) -> None:
        for name, arr in self.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise ArithmeticError(f"parameter {name!r} contains non-finite values")

    def _meta(self) -> np.ndarray:
        s = self.sizes
        return np.array([
            s.hidden, s.k_road, s.k_agent, s.m_queries, s.obs_radius, self.action_dim,
        ], dtype=np.float64)

    def save(self, path) -> None:
        out = {"_meta": self._meta()}
        out.update(self.tensors)
        write_tensors(path, out)

    @staticmethod
    def from_tensors(tensors: dict) -> "PolicyParams":
        """Rebuild params from a tensor table; extra names are ignored."""
        meta = tensors.get("_meta")
        if meta is None or meta.shape != (6,):
            raise CheckpointError("checkpoint lacks a valid _meta record")
        sizes = PolicySizes(
            hidden=int(meta[0]), k_road=int(meta[1]), k_agent=int(meta[2]),
            m_queries=int(meta[3]), obs_radius=float(meta[4]),
        )
        action_dim = int(meta[5])
        expected = PolicyParams._shapes(sizes, action_dim)
        picked = {}
        for name, shape in expected.items():
            arr = tensors.get(name)
            if arr is None:
                raise CheckpointError(f"checkpoint missing tensor {name!r}")
            if arr.shape != shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {arr.shape}, expected {shape}"
                )
            picked[name] = arr.copy()
        return PolicyParams(sizes, action_dim, picked)

    @staticmethod
    def load(path) -> "PolicyParams":
        return PolicyParams.from_tensors(read_tensors(path))


# -- forward pass ------------------------------------------------------------------

@dataclass
class ActResult:
    """One head evaluation for a batch of agents."""

    actions: ad.Var          # (N, A) squashed into the dynamics clip ranges
    raw: ad.Var              # (N, A) pre-squash Gaussian sample (or mean)
    mu_value: np.ndarray     # (N, A)
    sigma_value: np.ndarray  # (A,)
    eps: Optional[np.ndarray]
    log_probs: np.ndarray    # (N,) log density of the squashed actions


class PolicyTape:
    """Policy parameters staged onto a tape as leaves, plus the forward ops."""

    def __init__(self, tape: ad.Tape, params: PolicyParams):
        self.tape = tape
        self.params = params
        self.sizes = params.sizes
        self.v = {name: tape.leaf(arr) for name, arr in params.tensors.items()}
        self._obs_scale = observation_scale(params.sizes)

    def param_nids(self) -> dict:
        return {name: var.nid for name, var in self.v.items()}

    def zero_hidden(self, n_agents: int) -> ad.Var:
        return self.tape.leaf(np.zeros((n_agents, self.sizes.hidden)))

    def encode(self, obs) -> ad.Var:
        """Two-layer tanh MLP over normalized observations; (N, D) -> (N, hidden)."""
        x = obs if isinstance(obs, ad.Var) else self.tape.leaf(obs)
        x = x * self.tape.leaf(self._obs_scale)
        x = ad.tanh(x @ ad.transpose(self.v["enc_w1"]) + self.v["enc_b1"])
        return ad.tanh(x @ ad.transpose(self.v["enc_w2"]) + self.v["enc_b2"])

    def mix_agents(self, feats: ad.Var, valid: np.ndarray) -> ad.Var:
        """Self-attention over agents, then m learned queries summarize the scene.

        The mean-pooled summary is concatenated to each agent's feature and
        projected back to the hidden width. Invalid agents are masked out of
        every softmax and zeroed in the value path; output is permutation
        equivariant and the parameter count is independent of N.
        """
        valid = np.asarray(valid, dtype=bool)
        n = feats.value.shape[0]
        if valid.shape != (n,):
            raise ValueError(f"valid mask shape {valid.shape} does not match {n} agents")
        if not valid.any():
            raise ValueError("mix_agents: all agents masked invalid")
        scale = 1.0 / math.sqrt(self.sizes.hidden)
        col_mask = self.tape.leaf(np.where(valid, 0.0, -1e9))
        row_keep = self.tape.leaf(valid.astype(np.float64)[:, None])

        q = feats @ ad.transpose(self.v["mix_wq"])
        k = feats @ ad.transpose(self.v["mix_wk"])
        val = feats @ ad.transpose(self.v["mix_wv"])
        attn = ad.softmax((q @ ad.transpose(k)) * scale + col_mask, axis=-1)
        u = (attn @ val) * row_keep

        k2 = u @ ad.transpose(self.v["mix_wk2"])
        v2 = u @ ad.transpose(self.v["mix_wv2"])
        attn2 = ad.softmax(
            (self.v["mix_queries"] @ ad.transpose(k2)) * scale + col_mask, axis=-1
        )
        pooled = ad.mean(attn2 @ v2, axis=0)  # (hidden,)
        pooled_rows = self.tape.leaf(np.ones((n, 1))) * pooled
        cat = ad.concat([u, pooled_rows], axis=1)
        return cat @ ad.transpose(self.v["mix_wo"]) + self.v["mix_bo"]

    def gru_step(self, h: ad.Var, x: ad.Var) -> ad.Var:
        """Standard GRU cell; h' = (1 - z) * h + z * htilde."""
        xh = ad.concat([x, h], axis=1)
        z = ad.sigmoid(xh @ ad.transpose(self.v["gru_wz"]) + self.v["gru_bz"])
        r = ad.sigmoid(xh @ ad.transpose(self.v["gru_wr"]) + self.v["gru_br"])
        xrh = ad.concat([x, r * h], axis=1)
        htilde = ad.tanh(xrh @ ad.transpose(self.v["gru_wh"]) + self.v["gru_bh"])
        return (1.0 - z) * h + z * htilde

    def act(
        self,
        h: ad.Var,
        kind: DynamicsKind,
        rng: Optional[np.random.Generator] = None,
        eps: Optional[np.ndarray] = None,
    ) -> ActResult:
        """Gaussian head with pathwise sampling and tanh squashing.

        Sampling: a = bounds * tanh(mu + sigma * eps); gradients flow through
        mu and sigma only. Pass an rng to sample, explicit eps to replay frozen
        noise, or neither for the deterministic mean action.
        """
        n = h.value.shape[0]
        a_dim = self.params.action_dim
        if ACTION_ARITY[kind] != a_dim:
            raise ValueError(
                f"policy emits {a_dim} action dims, scenario needs {ACTION_ARITY[kind]}"
            )
        mu = h @ ad.transpose(self.v["head_w_mu"]) + self.v["head_b_mu"]
        log_std = ad.clamp(self.v["head_log_std"], LOG_STD_MIN, LOG_STD_MAX)
        sigma = ad.exp(log_std)
        if eps is None and rng is not None:
            eps = rng.standard_normal((n, a_dim))
        if eps is None:
            raw = mu
        else:
            eps = np.asarray(eps, dtype=np.float64)
            raw = mu + sigma * self.tape.leaf(eps)
        bounds = dyn.action_bounds(kind)
        actions = ad.tanh(raw) * self.tape.leaf(bounds)

        sig = sigma.value
        eps_val = np.zeros((n, a_dim)) if eps is None else eps
        gauss = -0.5 * (eps_val ** 2).sum(axis=1) - np.log(sig).sum() \
            - 0.5 * a_dim * math.log(2.0 * math.pi)
        squash = np.log(bounds * (1.0 - np.tanh(raw.value) ** 2) + 1e-12).sum(axis=1)
        return ActResult(actions, raw, mu.value.copy(), sig.copy(), eps, gauss - squash)


def batch_observations(
    state: SimState, scenario: Scenario, ctrl: list, sizes: PolicySizes
):
    """Observations for the controlled agents plus their validity mask.

    Agents invalid at this state cannot be observed; they get a zero feature
    row and are masked out of the mixer (and of any loss) downstream.
    """
    obs = np.zeros((len(ctrl), sizes.obs_dim))
    valid = np.array([state.valid[i] for i in ctrl])
    for row, i in enumerate(ctrl):
        if valid[row]:
            obs[row] = build_observation(state, scenario, i, sizes)
    return obs, valid


def warmup_hidden(
    pol: PolicyTape, scenario: Scenario, ctrl: list
) -> ad.Var:
    """Run the recurrent stack over the history frames, teacher-forced on the log."""
    h = pol.zero_hidden(len(ctrl))
    for t in range(scenario.history_len):
        obs, valid = batch_observations(scenario.log.states[t], scenario, ctrl, pol.sizes)
        x = pol.encode(obs)
        h = pol.gru_step(h, pol.mix_agents(x, valid))
    return h


def policy_step(
    pol: PolicyTape,
    h: ad.Var,
    state: SimState,
    scenario: Scenario,
    ctrl: list,
    rng: Optional[np.random.Generator] = None,
    eps: Optional[np.ndarray] = None,
):
    """One observe/encode/mix/recur/act step; returns (new hidden, ActResult)."""
    obs, valid = batch_observations(state, scenario, ctrl, pol.sizes)
    x = pol.encode(obs)
    h = pol.gru_step(h, pol.mix_agents(x, valid))
    return h, pol.act(h, scenario.dynamics, rng=rng, eps=eps)


def rollout_closed_loop(
    params: PolicyParams,
    scenario: Scenario,
    *,
    sample: bool,
    rng: Optional[np.random.Generator] = None,
    noise_sigma: float = 0.0,
) -> Trajectory:
    """Roll the policy out over the scenario horizon and return the trajectory.

    The returned trajectory spans the full timeline: log history states, the
    shared initial state, then the simulated horizon. Draw order per step is
    policy noise first (when sampling), then dynamics noise inside step_env.
    """
    if sample and rng is None:
        raise ValueError("sampling rollout requires an rng")
    ctrl = scenario.init.controlled_indices()
    states = list(scenario.log.states[: scenario.history_len + 1])
    sim = scenario.init
    if not ctrl:
        for _ in range(scenario.horizon):
            sim = dyn.step_env(sim, [None] * sim.n_agents, scenario, noise_sigma, rng)
            states.append(sim)
        return Trajectory(tuple(states), scenario.dt)

    tape = ad.Tape()
    pol = PolicyTape(tape, params)
    h = warmup_hidden(pol, scenario, ctrl)
    for _ in range(scenario.horizon):
        h, res = policy_step(pol, h, sim, scenario, ctrl,
                             rng=rng if sample else None)
        actions = [None] * sim.n_agents
        for row, i in enumerate(ctrl):
            actions[i] = Action.from_vec(scenario.dynamics, res.actions.value[row])
        sim = dyn.step_env(sim, actions, scenario, noise_sigma, rng)
        states.append(sim)
    return Trajectory(tuple(states), scenario.dt)
