"""Operator entry point: dataset generation, training, evaluation, gradient
checking, and best-mode trajectory export.

Exit codes partition the error classes so CI can gate on them:
2 usage / invalid spec, 3 NaN abort during training, 4 checkpoint or dataset
schema mismatch at evaluation, 5 gradient-check failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics
from . import scenario_io as sio
from . import trainer as tr
from .core import Scenario, Trajectory
from .policy import CheckpointError, PolicyParams, PolicySizes
from .verification import run_gradient_suite

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NAN = 3
EXIT_EVAL = 4
EXIT_GRADCHECK = 5

_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no"}

# key -> (parser, description); config files are `key = value` lines.
_CONFIG_KEYS = {
    "dataset": (str, "path to the dataset manifest, relative to the config file"),
    "mode": (str, "apg | bc"),
    "lr": (float, "Adam learning rate"),
    "lr_final": ("opt_float", "cosine-decay target; empty keeps lr constant"),
    "adam_beta1": (float, ""), "adam_beta2": (float, ""), "adam_eps": (float, ""),
    "batch_size": (int, "scenarios per optimizer step"),
    "epochs": (int, ""),
    "w_xy": (float, "position loss weight"),
    "w_v": (float, "velocity loss weight"),
    "w_yaw": (float, "yaw loss weight"),
    "reset": (str, "none | distance | time"),
    "reset_xi": (float, "distance-reset threshold, meters"),
    "reset_period": (int, "time-reset period, steps"),
    "curriculum_every": (int, "epochs between reset relaxations, 0 disables"),
    "grad_clip_norm": (float, "global-norm gradient clip"),
    "seed": (int, ""),
    "half_sequence": (bool, "train on the first half of each horizon"),
    "hidden_reset": (str, "zero | detach | keep"),
    "final_state_only": (bool, "supervise only the final state"),
    "stop_loss": ("opt_float", "stop when epoch mean loss drops below this"),
    "checkpoint_every": (int, "epochs between checkpoints, 0 = final only"),
    "hidden": (int, "policy hidden width"),
    "k_road": (int, "roadgraph points per observation"),
    "k_agent": (int, "neighbour slots per observation"),
    "m_queries": (int, "learned queries in the agent mixer"),
    "obs_radius": (float, "observation radius, meters"),
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    if key not in _CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _CONFIG_KEYS[key][0]
    raw = raw.strip()
    if kind == "opt_float":
        return None if raw == "" else float(raw)
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config_file(path) -> dict:
    """Read `key = value` lines; '#' starts a comment, blank lines ignored."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = _parse_value(key, raw)
    return values


def build_train_config(values: dict) -> tr.TrainConfig:
    sizes = PolicySizes(
        hidden=values.get("hidden", 64),
        k_road=values.get("k_road", 32),
        k_agent=values.get("k_agent", 8),
        m_queries=values.get("m_queries", 4),
        obs_radius=values.get("obs_radius", 50.0),
    )
    reset_kind = values.get("reset", "none")
    reset = tr.ResetPolicy(
        kind=reset_kind,
        xi=values.get("reset_xi", 1.0),
        period=values.get("reset_period", 10),
    )
    cfg = tr.TrainConfig(sizes=sizes, reset=reset)
    for key in (
        "mode", "lr", "lr_final", "adam_beta1", "adam_beta2", "adam_eps",
        "batch_size", "epochs", "w_xy", "w_v", "w_yaw", "curriculum_every",
        "grad_clip_norm", "seed", "half_sequence", "hidden_reset",
        "final_state_only", "stop_loss", "checkpoint_every",
    ):
        if key in values:
            cfg = replace(cfg, **{key: values[key]})
    return cfg


def _resolved_config_text(values: dict, config: tr.TrainConfig) -> str:
    lines = [f"tool_version = {__version__}"]
    merged = {
        "dataset": values.get("dataset", ""),
        "mode": config.mode, "lr": config.lr,
        "lr_final": "" if config.lr_final is None else config.lr_final,
        "adam_beta1": config.adam_beta1, "adam_beta2": config.adam_beta2,
        "adam_eps": config.adam_eps, "batch_size": config.batch_size,
        "epochs": config.epochs, "w_xy": config.w_xy, "w_v": config.w_v,
        "w_yaw": config.w_yaw, "reset": config.reset.kind,
        "reset_xi": config.reset.xi, "reset_period": config.reset.period,
        "curriculum_every": config.curriculum_every,
        "grad_clip_norm": config.grad_clip_norm, "seed": config.seed,
        "half_sequence": config.half_sequence, "hidden_reset": config.hidden_reset,
        "final_state_only": config.final_state_only,
        "stop_loss": "" if config.stop_loss is None else config.stop_loss,
        "checkpoint_every": config.checkpoint_every,
        "hidden": config.sizes.hidden, "k_road": config.sizes.k_road,
        "k_agent": config.sizes.k_agent, "m_queries": config.sizes.m_queries,
        "obs_radius": config.sizes.obs_radius,
    }
    lines += [f"{k} = {v}" for k, v in merged.items()]
    return "\n".join(lines) + "\n"


def cmd_gen(args) -> int:
    try:
        with open(args.spec) as f:
            doc = json.load(f)
        spec = sio.GenSpec.from_dict(doc)
        scenarios = sio.generate(spec)
    except (OSError, json.JSONDecodeError, sio.ScenarioSchemaError,
            sio.GeneratorError, ValueError) as e:
        print(f"gen: invalid spec: {e}", file=sys.stderr)
        return EXIT_USAGE
    manifest = sio.save_dataset(scenarios, args.out, split=args.split)
    print(f"wrote {len(scenarios)} scenarios, manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        values = parse_config_file(args.config)
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set needs key=value, got {item!r}")
            key, raw = item.split("=", 1)
            values[key.strip()] = _parse_value(key.strip(), raw)
        if args.mode:
            values["mode"] = args.mode
        config = build_train_config(values)
        if "dataset" not in values:
            raise ConfigError("config must name a dataset manifest")
        manifest = Path(args.config).parent / values["dataset"]
        dataset = sio.load_dataset(manifest)
    except (OSError, ConfigError, ValueError) as e:
        print(f"train: {e}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(_resolved_config_text(values, config))

    resume = None
    if args.resume:
        ckpts = sorted(out.glob("ckpt_*.bin"))
        last = out / "final.bin" if (out / "final.bin").exists() else (
            ckpts[-1] if ckpts else None
        )
        if last is not None:
            resume = tr.load_checkpoint(last)
            print(f"resuming from {last} at epoch {resume[2]}")
    try:
        tr.train(dataset, config, out_dir=out, resume=resume, jobs=args.jobs)
    except tr.NaNLossError as e:
        print(f"train: aborted: {e}", file=sys.stderr)
        return EXIT_NAN
    return EXIT_OK


def _export_best_trajectories(report, dataset, out_dir: Path) -> None:
    tdir = out_dir / "trajectories"
    tdir.mkdir(exist_ok=True)
    for scenario, ms in zip(dataset, report.mode_sets):
        best = ms.trajectories[ms.best_mode]
        exported = Scenario(
            id=scenario.id,
            roadgraph=scenario.roadgraph,
            log=best,
            is_modeled=scenario.is_modeled,
            dynamics=scenario.dynamics,
            history_len=scenario.history_len,
            horizon=scenario.horizon,
        )
        sio.save(exported, tdir / f"{scenario.id}.json")


def cmd_eval(args) -> int:
    try:
        params = PolicyParams.load(args.checkpoint)
        dataset = sio.load_dataset(args.dataset)
        if not dataset:
            raise sio.ScenarioSchemaError("dataset manifest selects no scenarios")
    except (CheckpointError, sio.ScenarioParseError, sio.ScenarioSchemaError,
            sio.ScenarioInvariantError, OSError) as e:
        print(f"eval: {e}", file=sys.stderr)
        return EXIT_EVAL
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = metrics.evaluate(
        params, dataset, args.modes, args.noise, args.seed,
        modeled_only=args.modeled_only,
    )
    metrics.write_mode_csv(report, out / "modes.csv")
    metrics.write_summary_csv(report, out / "summary.csv")
    _export_best_trajectories(report, dataset, out)
    s = report.summary
    print(
        f"k={s.k} noise={s.noise_sigma} minADE={s.min_ade:.4f} "
        f"best_mode_overlap={s.best_mode_overlap:.4f} "
        f"best_mode_offroad={s.best_mode_offroad:.4f} det_ade={s.det_ade:.4f}"
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    result = run_gradient_suite(seed=args.seed, corrupt=args.corrupt)
    print(result.text(), end="")
    if not result.passed:
        for c in result.failures():
            print(f"gradcheck: threshold violated: {c.name}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="apgsim",
        description="Differentiable 2D driving simulator and training toolkit",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scenario dataset")
    g.add_argument("--spec", required=True, help="generation spec JSON")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--split", default="train", help="split tag for the manifest")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", required=True, help="key = value training config file")
    t.add_argument("--mode", choices=["apg", "bc"], help="override the config mode")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    t.add_argument("--jobs", type=int,
                   default=int(os.environ.get("APG_SIM_THREADS", "1")),
                   help="parallel rollout workers (env APG_SIM_THREADS)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="dataset manifest")
    e.add_argument("--modes", type=int, default=8, help="sampled rollouts per scenario")
    e.add_argument("--noise", type=float, default=0.0, help="dynamics noise sigma, meters")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--modeled-only", action="store_true",
                   help="restrict metrics to is_modeled agents")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="run the gradient verification suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--corrupt", choices=["bicycle", "delta"],
                   help="test hook: inject a Jacobian fault")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
