"""Training loops: analytic policy gradients through the dynamics, a
behaviour-cloning baseline, Adam with global-norm clipping, and
incremental-reset curricula.

The APG rollout supervises every simulated state against the log state and
backpropagates through the dynamics step's action Jacobian only; the state fed
into each step is detached, so gradients reach earlier steps solely through
the GRU hidden state. Resets snap deviating agents back to the log mid-rollout
(by distance threshold or fixed period), which keeps data collection near the
expert trajectory; each reset also cuts or clears the hidden state according
to config.hidden_reset.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from .core import ACTION_ARITY, Action, Scenario, SimState, Trajectory
from .policy import PolicyParams, PolicySizes, PolicyTape, policy_step, read_tensors, \
    warmup_hidden, write_tensors


class NaNLossError(ArithmeticError):
    """Rollout loss became non-finite; carries the offending timestep."""

    def __init__(self, t: int):
        super().__init__(f"non-finite loss at timestep {t}")
        self.t = t


@dataclass(frozen=True)
class ResetPolicy:
    """When to snap simulated agents back to the log during training."""

    kind: str = "none"  # none | distance | time
    xi: float = 1.0     # meters, used by distance resets
    period: int = 10    # steps, used by time resets

    def __post_init__(self):
        if self.kind not in ("none", "distance", "time"):
            raise ValueError(f"unknown reset kind {self.kind!r}")
        if self.kind == "distance" and self.xi <= 0.0:
            raise ValueError(f"distance reset needs xi > 0, got {self.xi}")
        if self.kind == "time" and self.period < 1:
            raise ValueError(f"time reset needs period >= 1, got {self.period}")

    @staticmethod
    def none() -> "ResetPolicy":
        return ResetPolicy(kind="none")

    @staticmethod
    def distance(xi: float) -> "ResetPolicy":
        return ResetPolicy(kind="distance", xi=xi)

    @staticmethod
    def time(period: int) -> "ResetPolicy":
        return ResetPolicy(kind="time", period=period)


@dataclass
class TrainConfig:
    mode: str = "apg"  # apg | bc
    lr: float = 3e-3
    lr_final: Optional[float] = None  # cosine-decay target; None keeps lr constant
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 200
    w_xy: float = 1.0
    w_v: float = 0.2
    w_yaw: float = 1.0
    reset: ResetPolicy = field(default_factory=ResetPolicy)
    curriculum_every: int = 0  # epochs between reset relaxations; 0 disables
    grad_clip_norm: float = 1.0
    seed: int = 0
    half_sequence: bool = False
    hidden_reset: str = "zero"  # zero | detach | keep
    final_state_only: bool = False
    stop_loss: Optional[float] = None
    checkpoint_every: int = 0  # epochs; 0 saves only the final checkpoint
    sizes: PolicySizes = field(default_factory=PolicySizes)

    def __post_init__(self):
        if self.mode not in ("apg", "bc"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.hidden_reset not in ("zero", "detach", "keep"):
            raise ValueError(f"unknown hidden_reset {self.hidden_reset!r}")


@dataclass(frozen=True)
class ResetEvent:
    t: int
    agent: int
    cause: str


@dataclass
class RolloutRecord:
    """Everything one APG rollout produced besides the gradient map."""

    trajectory: Trajectory
    step_losses: list
    reset_events: list
    actions: list      # per step: list of Action per controlled agent
    log_probs: list    # per step: (n_controlled,) array
    deviations: list   # per step: max pre-reset distance to the log, controlled agents
    unsupervised_steps: int

    @property
    def total_loss(self) -> float:
        return float(np.mean(self.step_losses)) if self.step_losses else 0.0


# -- losses -------------------------------------------------------------------------

def _pair_loss(tape, pose_var, target, weights):
    """Weighted state-matching loss for one agent against one log state."""
    w_xy, w_v, w_yaw = weights
    pos = pose_var[0:2] - tape.leaf(np.array([target.x, target.y]))
    vel = pose_var[3:5] - tape.leaf(np.array([target.vx, target.vy]))
    # Shift the yaw target by the right multiple of 2*pi so the plain
    # difference equals the wrapped difference; the shift is a constant.
    raw = float(pose_var.value[2]) - target.yaw
    shift = target.yaw + 2.0 * math.pi * round(raw / (2.0 * math.pi))
    yaw = pose_var[2:3] - tape.leaf(np.array([shift]))
    return (
        w_xy * ad.l2_norm(pos) + w_v * ad.l2_norm(vel) + w_yaw * ad.l2_norm(yaw)
    )


def _supervised_indices(sim_state: SimState, log_state: SimState):
    return [
        i for i in range(sim_state.n_agents)
        if sim_state.controlled[i] and sim_state.valid[i] and log_state.valid[i]
    ]


def state_loss(s: SimState, log_state: SimState, weights) -> float:
    """Mean weighted state-matching loss over supervised agents.

    Supervised agents are those controlled and valid in both states; with none,
    the loss is 0. Each norm carries the 1e-12 epsilon under its square root,
    so even a perfect match reports a loss of a few 1e-6.
    """
    idx = _supervised_indices(s, log_state)
    if not idx:
        return 0.0
    tape = ad.Tape()
    terms = [
        _pair_loss(tape, tape.leaf(s.agents[i].pose_vec()), log_state.agents[i], weights)
        for i in idx
    ]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return float(total.value) / len(idx)


# -- APG rollout ---------------------------------------------------------------------

def _reset_hidden(tape, h, rows, mode):
    if not rows or mode == "keep":
        return h
    keep = np.ones((h.value.shape[0], 1))
    keep[rows] = 0.0
    if mode == "zero":
        return h * tape.leaf(keep)
    # detach: keep the value, cut the gradient for the reset rows
    return h * tape.leaf(keep) + ad.detach(h) * tape.leaf(1.0 - keep)


def rollout_apg(
    scenario: Scenario,
    params: PolicyParams,
    config: TrainConfig,
    rng: np.random.Generator,
    reset: Optional[ResetPolicy] = None,
    need_grads: bool = True,
):
    """One stochastic training rollout; returns (RolloutRecord, gradient map).

    Per step: detached observation -> encoder -> mixer -> GRU -> sampled action
    -> dynamics step recorded through its Jacobian primitive -> state loss
    against the log. The total loss is the per-step mean over the (possibly
    half-sequence-truncated) horizon; steps with no supervised agent count as
    zero and are tallied in the record. need_grads=False skips the backward
    pass (the gradient map comes back None), for probes that only need losses.
    """
    reset = config.reset if reset is None else reset
    ctrl = scenario.init.controlled_indices()
    if not ctrl:
        raise ValueError("scenario has no controlled agents to train on")
    kind = scenario.dynamics
    bounds = dyn.action_bounds(kind)
    weights = (config.w_xy, config.w_v, config.w_yaw)
    horizon = max(1, scenario.horizon // 2) if config.half_sequence else scenario.horizon

    tape = ad.Tape()
    pol = PolicyTape(tape, params)
    h = warmup_hidden(pol, scenario, ctrl)
    sim = scenario.init
    states = list(scenario.log.states[: scenario.history_len + 1])
    loss_terms = []
    step_losses, events, actions_rec, logps, deviations = [], [], [], [], []
    unsupervised = 0

    for k in range(horizon):
        t = scenario.history_len + k
        h, res = policy_step(pol, h, sim, scenario, ctrl, rng=rng)
        next_log = scenario.log.states[t + 1]

        n = sim.n_agents
        new_agents = list(next_log.agents)
        new_valid = list(next_log.valid)
        pose_vars = {}
        for row, i in enumerate(ctrl):
            a_var = ad.clamp(res.actions[row], -bounds, bounds)
            pose_vars[i] = dyn.step_on_tape(
                tape, kind, sim.agents[i].pose_vec(), a_var, scenario.dt
            )
            new_agents[i] = sim.agents[i].with_pose(pose_vars[i].value)
            new_valid[i] = sim.valid[i]
        sim_next = SimState(t + 1, tuple(new_agents), tuple(new_valid), sim.controlled)

        sup = _supervised_indices(sim_next, next_log)
        if sup:
            term = _pair_loss(tape, pose_vars[sup[0]], next_log.agents[sup[0]], weights)
            for i in sup[1:]:
                term = term + _pair_loss(tape, pose_vars[i], next_log.agents[i], weights)
            term = term * (1.0 / len(sup))
            if not np.isfinite(term.value):
                raise NaNLossError(t + 1)
            loss_terms.append(term)
            step_losses.append(float(term.value))
        else:
            loss_terms.append(None)
            step_losses.append(0.0)
            unsupervised += 1

        actions_rec.append([Action.from_vec(kind, res.actions.value[r]) for r in range(len(ctrl))])
        logps.append(res.log_probs)

        devs = {
            i: math.hypot(
                sim_next.agents[i].x - next_log.agents[i].x,
                sim_next.agents[i].y - next_log.agents[i].y,
            )
            for i in ctrl
        }
        deviations.append(max(devs.values()))
        snapped = []
        if reset.kind == "distance":
            snapped = [i for i in ctrl if devs[i] > reset.xi]
            cause = "distance"
        elif reset.kind == "time" and (k + 1) % reset.period == 0:
            snapped = list(ctrl)
            cause = "time"
        if snapped:
            agents2 = list(sim_next.agents)
            valid2 = list(sim_next.valid)
            for i in snapped:
                agents2[i] = next_log.agents[i]
                valid2[i] = next_log.valid[i]
                events.append(ResetEvent(t + 1, i, cause))
            sim_next = SimState(t + 1, tuple(agents2), tuple(valid2), sim_next.controlled)
            h = _reset_hidden(tape, h, [ctrl.index(i) for i in snapped], config.hidden_reset)

        states.append(sim_next)
        sim = sim_next

    supervised_terms = [term for term in loss_terms if term is not None]
    if config.final_state_only:
        total = loss_terms[-1] if loss_terms[-1] is not None else None
    else:
        total = None
        for term in supervised_terms:
            total = term if total is None else total + term
        if total is not None:
            total = total * (1.0 / horizon)
    if not need_grads:
        grads = None
    elif total is None:
        grads = {name: np.zeros_like(arr) for name, arr in params.tensors.items()}
    else:
        gmap = tape.backward(total)
        grads = {name: ad.grad_of(gmap, var) for name, var in pol.v.items()}

    record = RolloutRecord(
        trajectory=Trajectory(tuple(states), scenario.dt),
        step_losses=step_losses,
        reset_events=events,
        actions=actions_rec,
        log_probs=logps,
        deviations=deviations,
        unsupervised_steps=unsupervised,
    )
    return record, grads


# -- behaviour cloning ----------------------------------------------------------------

@dataclass
class BcRollout:
    loss: float
    grads: dict
    skipped_transitions: int


def rollout_bc_train(scenario: Scenario, params: PolicyParams, config: TrainConfig) -> BcRollout:
    """Teacher-forced action regression against inverse-dynamics expert actions.

    Observations come from log states, the head runs deterministically, and the
    loss is the mean L2 distance between predicted and expert actions over all
    valid transitions; no simulator stepping enters the gradient path.
    """
    ctrl = scenario.init.controlled_indices()
    if not ctrl:
        raise ValueError("scenario has no controlled agents to train on")
    kind = scenario.dynamics
    horizon = max(1, scenario.horizon // 2) if config.half_sequence else scenario.horizon

    tape = ad.Tape()
    pol = PolicyTape(tape, params)
    h = warmup_hidden(pol, scenario, ctrl)
    terms = []
    skipped = 0
    for k in range(horizon):
        t = scenario.history_len + k
        state = scenario.log.states[t]
        next_log = scenario.log.states[t + 1]
        if not any(state.valid[i] for i in ctrl):
            skipped += len(ctrl)  # nothing observable at this step
            continue
        h, res = policy_step(pol, h, state, scenario, ctrl, rng=None)
        for row, i in enumerate(ctrl):
            if not (state.valid[i] and next_log.valid[i]):
                skipped += 1
                continue
            expert = dyn.inverse_action(kind, state.agents[i], next_log.agents[i], scenario.dt)
            terms.append(ad.l2_norm(res.actions[row] - tape.leaf(expert.as_vec())))
    if not terms:
        return BcRollout(0.0, {n: np.zeros_like(a) for n, a in params.tensors.items()}, skipped)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    total = total * (1.0 / len(terms))
    if not np.isfinite(total.value):
        raise NaNLossError(scenario.history_len)
    gmap = tape.backward(total)
    grads = {name: ad.grad_of(gmap, var) for name, var in pol.v.items()}
    return BcRollout(float(total.value), grads, skipped)


# -- optimizer -------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: PolicyParams):
        self.m = {n: np.zeros_like(a) for n, a in params.tensors.items()}
        self.v = {n: np.zeros_like(a) for n, a in params.tensors.items()}
        self.t = 0
        self.skipped = 0


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def adam_step(
    params: PolicyParams,
    grads: dict,
    state: AdamState,
    config: TrainConfig,
    lr: Optional[float] = None,
) -> PolicyParams:
    """In-place Adam update with bias correction and global-norm clipping.

    Clipping rescales the whole gradient before the moment updates; a
    non-finite gradient skips the step entirely (counted on the state).
    log_std is re-clamped after the update.
    """
    lr = config.lr if lr is None else lr
    gnorm = global_norm(grads)
    if not math.isfinite(gnorm):
        state.skipped += 1
        return params
    scale = 1.0
    if config.grad_clip_norm > 0.0 and gnorm > config.grad_clip_norm:
        scale = config.grad_clip_norm / gnorm
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, arr in params.tensors.items():
        g = grads[name] * scale
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        arr -= lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    params.clamp_log_std()
    return params


def curriculum_tick(config: TrainConfig, epoch: int, horizon: int) -> ResetPolicy:
    """Reset policy after curriculum relaxation at the given epoch.

    Every curriculum_every epochs the time period (capped at the horizon) or
    the distance threshold (capped at twice the observation radius) doubles.
    """
    base = config.reset
    if config.curriculum_every <= 0 or base.kind == "none":
        return base
    doublings = epoch // config.curriculum_every
    if doublings <= 0:
        return base
    if base.kind == "time":
        return ResetPolicy.time(min(base.period * 2 ** doublings, max(1, horizon)))
    return ResetPolicy.distance(
        min(base.xi * 2.0 ** doublings, 2.0 * config.sizes.obs_radius)
    )


# -- training loop ----------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    grad_norm: float
    reset_count: int
    wall_ms: int

    def line(self) -> str:
        return (
            f"epoch={self.epoch} mean_loss={self.mean_loss!r} "
            f"grad_norm={self.grad_norm!r} reset_count={self.reset_count} "
            f"wall_ms={self.wall_ms}"
        )


class TrainingLog:
    """Newline-delimited key=value records, one per epoch."""

    def __init__(self, entries: Optional[list] = None):
        self.entries = entries or []

    def append(self, stats: EpochStats):
        self.entries.append(stats)

    def text(self) -> str:
        return "".join(s.line() + "\n" for s in self.entries)

    @staticmethod
    def parse(text: str) -> "TrainingLog":
        entries = []
        for line in text.splitlines():
            if not line.strip():
                continue
            kv = dict(part.split("=", 1) for part in line.split())
            entries.append(EpochStats(
                epoch=int(kv["epoch"]),
                mean_loss=float(kv["mean_loss"]),
                grad_norm=float(kv["grad_norm"]),
                reset_count=int(kv["reset_count"]),
                wall_ms=int(kv["wall_ms"]),
            ))
        return TrainingLog(entries)


def _lr_at(config: TrainConfig, epoch: int) -> float:
    if config.lr_final is None or config.epochs <= 1:
        return config.lr
    frac = min(1.0, epoch / (config.epochs - 1))
    return config.lr_final + 0.5 * (config.lr - config.lr_final) * (1.0 + math.cos(math.pi * frac))


def save_checkpoint(path, params: PolicyParams, opt: AdamState, next_epoch: int) -> None:
    out = {"_meta": params._meta()}
    out.update(params.tensors)
    for name, arr in opt.m.items():
        out[f"adam.m.{name}"] = arr
    for name, arr in opt.v.items():
        out[f"adam.v.{name}"] = arr
    out["_adam_t"] = np.array(float(opt.t))
    out["_next_epoch"] = np.array(float(next_epoch))
    write_tensors(path, out)


def load_checkpoint(path):
    """Returns (params, optimizer state or None, next epoch)."""
    tensors = read_tensors(path)
    params = PolicyParams.from_tensors(tensors)
    opt = AdamState(params)
    if "_adam_t" in tensors:
        opt.t = int(tensors["_adam_t"])
        for name in params.tensors:
            opt.m[name] = tensors[f"adam.m.{name}"].copy()
            opt.v[name] = tensors[f"adam.v.{name}"].copy()
    next_epoch = int(tensors.get("_next_epoch", np.array(0.0)))
    return params, opt, next_epoch


def _rollout_one(scenario, params, config, reset, epoch, scen_idx):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, scen_idx]))
    if config.mode == "apg":
        record, grads = rollout_apg(scenario, params, config, rng, reset=reset)
        return record.total_loss, grads, len(record.reset_events)
    bc = rollout_bc_train(scenario, params, config)
    return bc.loss, bc.grads, 0


def train(
    dataset: Sequence[Scenario],
    config: TrainConfig,
    *,
    out_dir=None,
    on_epoch: Optional[Callable] = None,
    resume=None,
    jobs: int = 1,
):
    """Epochs over shuffled scenarios; per batch: rollouts, summed gradients,
    one Adam step. Returns (params, TrainingLog).

    Every run is deterministic given (config, dataset): rollout rngs derive
    from (seed, epoch, scenario index), shuffles from (seed, epoch), so a
    resumed run continues exactly where the interrupted one left off.
    on_epoch(epoch, params, stats) runs after each epoch; returning a truthy
    value stops training early (in addition to config.stop_loss).
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    kinds = {s.dynamics for s in dataset}
    if len(kinds) > 1:
        raise ValueError("dataset mixes dynamics models")
    action_dim = ACTION_ARITY[dataset[0].dynamics]

    if resume is not None:
        params, opt, start_epoch = resume
    else:
        params = PolicyParams.init(config.sizes, action_dim, config.seed)
        opt = AdamState(params)
        start_epoch = 0
    max_horizon = max(s.horizon for s in dataset)
    log = TrainingLog()

    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "training_log.txt", "a")

    pool = None
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        pool = ThreadPoolExecutor(max_workers=jobs)
    try:
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            reset = curriculum_tick(config, epoch, max_horizon)
            order = np.random.default_rng(
                np.random.SeedSequence([config.seed, 0x5F, epoch])
            ).permutation(len(dataset))
            losses = []
            gnorms = []
            reset_count = 0
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                args = [
                    (dataset[i], params, config, reset, epoch, int(i)) for i in batch
                ]
                if pool is not None:
                    results = list(pool.map(lambda a: _rollout_one(*a), args))
                else:
                    results = [_rollout_one(*a) for a in args]
                grads_sum = {n: np.zeros_like(a) for n, a in params.tensors.items()}
                for loss, grads, nresets in results:
                    losses.append(loss)
                    reset_count += nresets
                    for name in grads_sum:
                        grads_sum[name] += grads[name]
                gnorms.append(global_norm(grads_sum))
                adam_step(params, grads_sum, opt, config, lr=_lr_at(config, epoch))
            stats = EpochStats(
                epoch=epoch,
                mean_loss=float(np.mean(losses)),
                grad_norm=float(np.mean(gnorms)),
                reset_count=reset_count,
                wall_ms=int(round((time.perf_counter() - t0) * 1000.0)),
            )
            log.append(stats)
            if log_file is not None:
                log_file.write(stats.line() + "\n")
                log_file.flush()
            if out_dir is not None and config.checkpoint_every > 0 \
                    and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_{epoch + 1:06d}.bin", params, opt, epoch + 1)
            if on_epoch is not None and on_epoch(epoch, params, stats):
                break
            if config.stop_loss is not None and stats.mean_loss < config.stop_loss:
                break
        if out_dir is not None:
            save_checkpoint(out_dir / "final.bin", params, opt, config.epochs)
    finally:
        if log_file is not None:
            log_file.close()
        if pool is not None:
            pool.shutdown()
    return params, log
