"""Evaluation metrics: displacement error, oriented-box overlap, offroad tests,
and the multi-mode evaluation harness with CSV reports.

A "mode" is one sampled rollout of the stochastic policy; the best mode of a
scenario is the one with the lowest ADE. Rates are reported both as the value
of the best-ADE mode and as per-metric minima over modes, since either reading
of "min" is defensible.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import policy as pol
from .core import AgentState, Scenario, SimState, Trajectory


def ade(sim: Trajectory, log: Trajectory, mask: np.ndarray) -> float:
    """Mean Euclidean (x, y) distance over the masked (t, agent) pairs.

    mask has shape (T+1, N); the caller marks which pairs count (typically the
    horizon steps where both sim and log agents are valid).
    """
    if len(sim) != len(log):
        raise ValueError(f"trajectory lengths differ: {len(sim)} vs {len(log)}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(sim), sim.states[0].n_agents):
        raise ValueError(f"mask shape {mask.shape} does not match trajectory")
    if not mask.any():
        raise ValueError("ade: empty mask")
    total = 0.0
    count = 0
    for t in range(len(sim)):
        row = mask[t]
        if not row.any():
            continue
        for i in np.flatnonzero(row):
            a, b = sim.states[t].agents[i], log.states[t].agents[i]
            total += math.hypot(a.x - b.x, a.y - b.y)
            count += 1
    return total / count


def eval_mask(sim: Trajectory, scenario: Scenario, modeled_only: bool = False) -> np.ndarray:
    """Horizon-only mask of controlled agents valid in both sim and log."""
    n = scenario.n_agents
    mask = np.zeros((len(sim), n), dtype=bool)
    ctrl = scenario.init.controlled
    for t in range(scenario.history_len + 1, len(sim)):
        for i in range(n):
            ok = ctrl[i] and sim.states[t].valid[i] and scenario.log.states[t].valid[i]
            if modeled_only:
                ok = ok and scenario.is_modeled[i]
            mask[t, i] = ok
    return mask


# -- geometry -----------------------------------------------------------------------

def box_corners(s: AgentState) -> np.ndarray:
    """World-frame corners of the agent's footprint, counter-clockwise (4, 2)."""
    c, sn = math.cos(s.yaw), math.sin(s.yaw)
    hl, hw = 0.5 * s.length, 0.5 * s.width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -sn], [sn, c]])
    return local @ rot.T + np.array([s.x, s.y])


def obb_separation(a: AgentState, b: AgentState) -> float:
    """Signed separation via the separating-axis theorem over the 4 box axes.

    Positive: the boxes are separated by at least that gap along some axis.
    Zero or negative: no axis separates them (touching counts as overlap).
    """
    ca = box_corners(a)
    cb = box_corners(b)
    axes = []
    for yaw in (a.yaw, b.yaw):
        c, sn = math.cos(yaw), math.sin(yaw)
        axes.append((c, sn))
        axes.append((-sn, c))
    best = -math.inf
    for ax, ay in axes:
        pa = ca[:, 0] * ax + ca[:, 1] * ay
        pb = cb[:, 0] * ax + cb[:, 1] * ay
        gap = max(pb.min() - pa.max(), pa.min() - pb.max())
        if gap > best:
            best = gap
    return best


def obb_overlap(a: AgentState, b: AgentState) -> bool:
    """True iff the two oriented footprints intersect; touching edges count."""
    return obb_separation(a, b) <= 0.0


def _point_polyline_distance(x: float, y: float, points: np.ndarray) -> float:
    a = points[:-1]
    ab = points[1:] - a
    ap = np.array([x, y]) - a
    denom = (ab * ab).sum(axis=1)
    t = np.clip((ap * ab).sum(axis=1) / np.maximum(denom, 1e-300), 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = np.hypot(proj[:, 0] - x, proj[:, 1] - y)
    return float(d.min())


def offroad(a: AgentState, roadgraph: Sequence) -> bool:
    """True iff the agent center is outside every polyline's corridor.

    A polyline covers the agent when the exact point-to-segment distance is at
    most its half-width; an exactly-equal distance still counts as on-road.
    """
    if not roadgraph:
        raise ValueError("offroad: empty roadgraph")
    for p in roadgraph:
        if _point_polyline_distance(a.x, a.y, p.points) <= p.half_width:
            return False
    return True


@dataclass(frozen=True)
class FlagSummary:
    """Per-trajectory collision/offroad flags plus transition-level fractions."""

    overlap_flag: bool
    offroad_flag: bool
    overlap_perc: float
    offroad_perc: float


def trajectory_flags(traj: Trajectory, scenario: Scenario) -> FlagSummary:
    """Flags over the horizon: any controlled agent overlapping / offroad.

    The *_perc values are fractions over all (controlled agent, horizon step)
    pairs that are valid in the sim trajectory; overlap partners can be any
    other valid agent, controlled or not.
    """
    overlap_hits = 0
    offroad_hits = 0
    pairs = 0
    for t in range(scenario.history_len + 1, len(traj)):
        state = traj.states[t]
        for i in range(state.n_agents):
            if not (state.controlled[i] and state.valid[i]):
                continue
            pairs += 1
            me = state.agents[i]
            if offroad(me, scenario.roadgraph):
                offroad_hits += 1
            for j in range(state.n_agents):
                if j != i and state.valid[j] and obb_overlap(me, state.agents[j]):
                    overlap_hits += 1
                    break
    if pairs == 0:
        return FlagSummary(False, False, 0.0, 0.0)
    return FlagSummary(
        overlap_hits > 0, offroad_hits > 0, overlap_hits / pairs, offroad_hits / pairs
    )


# -- multi-mode evaluation -----------------------------------------------------------

@dataclass
class ModeSet:
    """K sampled rollouts of one scenario with their metric triples."""

    scenario_id: str
    trajectories: list
    ades: list
    flags: list  # FlagSummary per mode

    @property
    def best_mode(self) -> int:
        return int(np.argmin(self.ades))


@dataclass
class EvalSummary:
    k: int
    noise_sigma: float
    min_ade: float
    min_overlap: float
    min_offroad: float
    best_mode_overlap: float
    best_mode_offroad: float
    det_ade: float


@dataclass
class EvalReport:
    mode_sets: list
    det_ades: list
    summary: EvalSummary

    def ade_matrix(self) -> np.ndarray:
        """(n_scenarios, K) per-mode ADEs, mode order = seed order."""
        return np.array([ms.ades for ms in self.mode_sets])

    def min_ade_for_prefix(self, k: int) -> float:
        """Dataset minADE using only the first k modes of every scenario."""
        m = self.ade_matrix()
        if not 1 <= k <= m.shape[1]:
            raise ValueError(f"prefix k={k} outside 1..{m.shape[1]}")
        return float(m[:, :k].min(axis=1).mean())


def evaluate(
    params,
    dataset: Sequence[Scenario],
    k: int,
    noise_sigma: float,
    seed: int,
    modeled_only: bool = False,
) -> EvalReport:
    """K sampled rollouts per scenario plus one deterministic rollout.

    Mode m of scenario i always uses the same rng stream regardless of k, so
    mode sets are nested across different k. Dataset-level numbers are means
    over scenarios: the ADE of each scenario's best (lowest-ADE) mode, that
    mode's overlap/offroad flags, and the per-metric minima over modes.
    """
    if k < 1:
        raise ValueError(f"need k >= 1, got {k}")
    if not dataset:
        raise ValueError("evaluate: empty dataset")
    mode_sets = []
    det_ades = []
    for si, scenario in enumerate(dataset):
        trajs, ades_, flags = [], [], []
        for m in range(k):
            rng = np.random.default_rng(np.random.SeedSequence([seed, si, m]))
            traj = pol.rollout_closed_loop(
                params, scenario, sample=True, rng=rng, noise_sigma=noise_sigma
            )
            trajs.append(traj)
            ades_.append(ade(traj, scenario.log, eval_mask(traj, scenario, modeled_only)))
            flags.append(trajectory_flags(traj, scenario))
        mode_sets.append(ModeSet(scenario.id, trajs, ades_, flags))
        det_rng = np.random.default_rng(np.random.SeedSequence([seed, si, 0xDE7]))
        det_traj = pol.rollout_closed_loop(
            params, scenario, sample=False, rng=det_rng, noise_sigma=noise_sigma
        )
        det_ades.append(ade(det_traj, scenario.log, eval_mask(det_traj, scenario, modeled_only)))

    best = [ms.best_mode for ms in mode_sets]
    summary = EvalSummary(
        k=k,
        noise_sigma=noise_sigma,
        min_ade=float(np.mean([ms.ades[b] for ms, b in zip(mode_sets, best)])),
        min_overlap=float(np.mean([
            min(f.overlap_flag for f in ms.flags) for ms in mode_sets
        ])),
        min_offroad=float(np.mean([
            min(f.offroad_flag for f in ms.flags) for ms in mode_sets
        ])),
        best_mode_overlap=float(np.mean([
            mode_sets[i].flags[b].overlap_flag for i, b in enumerate(best)
        ])),
        best_mode_offroad=float(np.mean([
            mode_sets[i].flags[b].offroad_flag for i, b in enumerate(best)
        ])),
        det_ade=float(np.mean(det_ades)),
    )
    return EvalReport(mode_sets, det_ades, summary)


def write_mode_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([
            "scenario_id", "mode", "ade", "overlap_flag", "offroad_flag",
            "overlap_perc", "offroad_perc",
        ])
        for ms in report.mode_sets:
            for m, (a, fl) in enumerate(zip(ms.ades, ms.flags)):
                w.writerow([
                    ms.scenario_id, m, repr(a), int(fl.overlap_flag),
                    int(fl.offroad_flag), repr(fl.overlap_perc), repr(fl.offroad_perc),
                ])


def write_summary_csv(report: EvalReport, path) -> None:
    s = report.summary
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([
            "k", "noise_sigma", "min_ade", "min_overlap", "min_offroad",
            "best_mode_overlap", "best_mode_offroad", "det_ade",
        ])
        w.writerow([
            s.k, repr(s.noise_sigma), repr(s.min_ade), repr(s.min_overlap),
            repr(s.min_offroad), repr(s.best_mode_overlap),
            repr(s.best_mode_offroad), repr(s.det_ade),
        ])
