"""Experiment runner.

Subcommands: explore, task, census, dynamics, effect-cost, hierarchy-usage.
Common flags: --config PATH (JSON), --seed N (repeatable), --out-dir PATH,
--budget N, --effects-mode MODE. Exit codes: 0 success, 1 configuration or
startup error, 2 runtime failure.

Each seed writes into <out-dir>/seed_<n>/: training_curve.csv or the
census/cost CSVs, plus checkpoints (total_effects.ckpt, effect_vae.ckpt,
q_effect.ckpt, q_task.ckpt, q_baseline.ckpt) and run_state.json.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import trainer as tr
from .config import (
    RunConfig,
    build_baseline,
    build_components,
    build_env,
    build_schedule,
    build_task_net,
    load_config,
    phase_params,
    seed_for,
    with_overrides,
)
from .errors import ConfigError
from .gridworld import COL_CARRY, ROW_AGENT
from .metrics import CurveWriter, write_effect_cost, write_effect_counts
from .policies import LinearDecay

CKPT_DYNAMICS = "total_effects.ckpt"
CKPT_VAE = "effect_vae.ckpt"
CKPT_POLICY = "q_effect.ckpt"
CKPT_TASK = "q_task.ckpt"
CKPT_BASELINE = "q_baseline.ckpt"


def _seed_dir(out_dir: str, seed: int) -> Path:
    path = Path(out_dir) / f"seed_{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _save_components(comps, where: Path) -> None:
    comps.dynamics.save(where / CKPT_DYNAMICS)
    comps.vae.save(where / CKPT_VAE)
    comps.policy.save(where / CKPT_POLICY)


def _load_components(cfg: RunConfig, seed: int, from_dir: str):
    comps = build_components(cfg, seed)
    where = Path(from_dir)
    if not where.exists():
        raise ConfigError(f"checkpoint directory not found: {where}")
    if (where / f"seed_{seed}").exists():
        where = where / f"seed_{seed}"
    for name in (CKPT_DYNAMICS, CKPT_VAE, CKPT_POLICY):
        if not (where / name).exists():
            raise ConfigError(f"missing checkpoint {name} in {where}")
    comps.dynamics.load(where / CKPT_DYNAMICS)
    comps.vae.load(where / CKPT_VAE)
    comps.policy.load(where / CKPT_POLICY)
    return comps


def cmd_explore(cfg: RunConfig) -> int:
    for seed in cfg.seeds:
        out = _seed_dir(cfg.out_dir, seed)
        env = build_env(cfg)
        comps = build_components(cfg, seed)
        schedule = build_schedule(cfg)
        sink = CurveWriter(out / "training_curve.csv")
        rng = np.random.default_rng(seed_for(seed, "explore-loop"))

        def save_state(env_step, comps=comps, out=out):
            _save_components(comps, out)
            (out / "run_state.json").write_text(json.dumps({"env_step": env_step}))

        _save_components(comps, out)
        tr.run_exploration(
            env, comps, schedule, cfg.explore_budget, phase_params(cfg), rng,
            effects_mode=cfg.effects_mode, sink=sink, seed=seed,
            checkpoint_cb=save_state, checkpoint_interval=cfg.checkpoint_interval)
        save_state(cfg.explore_budget)
    return 0


def cmd_task(cfg: RunConfig, task: str, from_dir: str, baseline: bool) -> int:
    cfg = with_overrides(cfg, task=task)
    for seed in cfg.seeds:
        out = _seed_dir(cfg.out_dir, seed)
        env = build_env(cfg)
        sink = CurveWriter(out / "training_curve.csv")
        if baseline:
            net = build_baseline(cfg, seed)
            rng = np.random.default_rng(seed_for(seed, "baseline-loop"))
            tr.run_baseline(env, net, cfg.task_budget, phase_params(cfg), rng,
                            capacity=cfg.baseline_capacity, sink=sink, seed=seed)
            net.save(out / CKPT_BASELINE)
        else:
            comps = _load_components(cfg, seed, from_dir)
            qt = build_task_net(cfg, seed)
            rng = np.random.default_rng(seed_for(seed, "task-loop"))
            decay = LinearDecay(cfg.q_task_eps_start, cfg.q_task_eps_end,
                                cfg.q_task_eps_steps)
            tr.run_task(env, comps, qt, cfg.task_budget, phase_params(cfg), rng,
                        effects_mode=cfg.effects_mode, sink=sink, seed=seed,
                        eps_decay=decay)
            qt.save(out / CKPT_TASK)
    return 0


def cmd_census(cfg: RunConfig, policy: str, from_dir: str | None) -> int:
    if policy not in ("random_action", "random_effect"):
        raise ConfigError(f"census policy must be random_action or random_effect")
    for seed in cfg.seeds:
        out = _seed_dir(cfg.out_dir, seed)
        env = build_env(cfg)
        rng = np.random.default_rng(seed_for(seed, f"census-{policy}"))
        comps = None
        if policy == "random_effect":
            if from_dir is None:
                raise ConfigError("random_effect census needs --from checkpoints")
            comps = _load_components(cfg, seed, from_dir)
        counts = tr.record_effect_census(
            env, cfg.census_budget, rng, comps=comps,
            effects_mode=cfg.effects_mode, params=phase_params(cfg))
        write_effect_counts(out / "effect_counts.csv", seed, policy, counts)
    return 0


def cmd_dynamics(cfg: RunConfig, demons: int, dynamics: str, effects: str) -> int:
    if effects not in ("controlled", "total"):
        raise ConfigError("--effects must be controlled or total")
    mode = "learned" if effects == "controlled" else "total"
    cfg = with_overrides(cfg, demon_count=demons, demon_dynamics=dynamics,
                         effects_mode=mode, task="BT")
    carry_index = ROW_AGENT * 5 + COL_CARRY
    for seed in cfg.seeds:
        out = _seed_dir(cfg.out_dir, seed)
        env = build_env(cfg)
        comps = build_components(cfg, seed)
        schedule = build_schedule(cfg)
        sink = CurveWriter(out / "training_curve.csv")
        rng = np.random.default_rng(seed_for(seed, "dynamics-loop"))
        tracker = tr.PickSuccessTracker(carry_index)
        tr.run_exploration(
            env, comps, schedule, cfg.dynamics_budget, phase_params(cfg), rng,
            effects_mode=mode, sink=sink, seed=seed, task="pick",
            pick_tracker=tracker)
        _save_components(comps, out)
        summary = {
            "demons": demons, "dynamics": dynamics, "effects": effects,
            "pick_success_rate": tracker.rate,
            "pick_attempts": tracker.pick_attempts,
            "crossing_step": tracker.crossing_step,
        }
        (out / "dynamics_summary.json").write_text(json.dumps(summary, indent=2))
    return 0


def cmd_effect_cost(cfg: RunConfig) -> int:
    for seed in cfg.seeds:
        out = _seed_dir(cfg.out_dir, seed)
        env = build_env(cfg)
        comps = build_components(cfg, seed)
        schedule = build_schedule(cfg)
        sink = CurveWriter(out / "training_curve.csv")
        rng = np.random.default_rng(seed_for(seed, "explore-loop"))
        tracker = tr.GoalSuccessTracker()
        tr.run_exploration(
            env, comps, schedule, cfg.explore_budget, phase_params(cfg), rng,
            effects_mode=cfg.effects_mode, sink=sink, seed=seed,
            goal_tracker=tracker)
        _save_components(comps, out)
        rows = [(key, tracker.category(key), tracker.crossing_step.get(key))
                for key in tracker.keys()]
        write_effect_cost(out / "effect_cost.csv", seed, rows)
    return 0


def cmd_hierarchy_usage(cfg: RunConfig, task: str, from_dir: str) -> int:
    cfg = with_overrides(cfg, task=task)
    for seed in cfg.seeds:
        out = _seed_dir(cfg.out_dir, seed)
        env = build_env(cfg)
        comps = _load_components(cfg, seed, from_dir)
        qt = build_task_net(cfg, seed)
        where = Path(from_dir)
        if (where / f"seed_{seed}").exists():
            where = where / f"seed_{seed}"
        if not (where / CKPT_TASK).exists():
            raise ConfigError(f"missing task checkpoint in {where}")
        qt.load(where / CKPT_TASK)
        rng = np.random.default_rng(seed_for(seed, "usage-loop"))
        checksums = (qt.online.checksum(), comps.policy.online.checksum())
        from collections import Counter
        counter: Counter = Counter()
        tr.run_task(env, comps, qt, cfg.usage_budget, phase_params(cfg), rng,
                    effects_mode=cfg.effects_mode, seed=seed, train=False,
                    goal_counter=counter)
        if (qt.online.checksum(), comps.policy.online.checksum()) != checksums:
            raise ConfigError("evaluation mutated parameters")
        write_effect_counts(out / "effect_counts.csv", seed, "task", counter)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="effectrl",
        description="Train and evaluate controlled-effect agents on the grid world.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, action="append",
                       help="root seed (repeatable)")
        p.add_argument("--out-dir", help="artifact directory")
        p.add_argument("--budget", type=int, help="step budget override")
        p.add_argument("--effects-mode", choices=("learned", "oracle", "total"))
        p.add_argument("--grid-size", type=int)
        p.add_argument("--schedule-scale", type=float)

    p = sub.add_parser("explore", help="unsupervised exploration phase")
    common(p)
    p = sub.add_parser("task", help="task-specific learning phase")
    common(p)
    p.add_argument("--task", required=True, choices=("T", "BT", "CBT"))
    p.add_argument("--from", dest="from_dir", help="exploration checkpoint dir")
    p.add_argument("--baseline", action="store_true",
                   help="train the flat baseline instead")
    p = sub.add_parser("census", help="record performed effects, no training")
    common(p)
    p.add_argument("--policy", required=True,
                   choices=("random_action", "random_effect"))
    p.add_argument("--from", dest="from_dir")
    p = sub.add_parser("dynamics", help="pick-ball ablation under demon dynamics")
    common(p)
    p.add_argument("--demons", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--dynamics", required=True,
                   choices=("static", "horizontal", "circular"))
    p.add_argument("--effects", required=True, choices=("controlled", "total"))
    p = sub.add_parser("effect-cost", help="record when each effect became reliable")
    common(p)
    p = sub.add_parser("hierarchy-usage", help="census of goals a trained task policy picks")
    common(p)
    p.add_argument("--task", required=True, choices=("T", "BT", "CBT"))
    p.add_argument("--from", dest="from_dir", required=True)
    return parser


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    budget_field = {
        "explore": "explore_budget",
        "task": "task_budget",
        "census": "census_budget",
        "dynamics": "dynamics_budget",
        "effect-cost": "explore_budget",
        "hierarchy-usage": "usage_budget",
    }[args.command]
    overrides = {
        "seeds": tuple(args.seed) if args.seed else None,
        "out_dir": args.out_dir,
        "effects_mode": args.effects_mode,
        "grid_size": args.grid_size,
        "schedule_scale": args.schedule_scale,
        budget_field: args.budget,
    }
    return with_overrides(cfg, **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "explore":
            return cmd_explore(cfg)
        if args.command == "task":
            if not args.baseline and not args.from_dir:
                raise ConfigError("task needs --from checkpoints (or --baseline)")
            return cmd_task(cfg, args.task, args.from_dir, args.baseline)
        if args.command == "census":
            return cmd_census(cfg, args.policy, args.from_dir)
        if args.command == "dynamics":
            return cmd_dynamics(cfg, args.demons, args.dynamics, args.effects)
        if args.command == "effect-cost":
            return cmd_effect_cost(cfg)
        if args.command == "hierarchy-usage":
            return cmd_hierarchy_usage(cfg, args.task, args.from_dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
