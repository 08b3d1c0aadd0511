"""Telemetry CSV schemas: writers and strict parsers.

Three streams leave a run: training curves (one row per 1000 env steps),
effect censuses (counts per discretized effect and category) and effect
costs (when each goal effect first reached a 0.9 rolling success). The
headers are part of the interface; the parsers reject any drift.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

from .errors import ConfigError

TRAINING_CURVE_COLUMNS = (
    "seed", "phase", "task", "env_step", "effect_step", "wall_time_s",
    "mean_reward", "goal_success_rate", "loss_total_effects",
    "loss_vae_recon", "loss_vae_kl", "loss_q",
)
EFFECT_COUNTS_COLUMNS = ("seed", "policy", "effect_hash", "category", "count")
EFFECT_COST_COLUMNS = ("seed", "effect_hash", "category", "env_step_at_0_9")

PHASES = ("explore", "task", "baseline")
TASK_LABELS = ("T", "BT", "CBT", "pick")
POLICY_LABELS = ("random_action", "random_effect", "task")
CATEGORIES = ("nothing", "basic", "simple", "complex")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


class CurveWriter:
    """Appends training-curve rows; the header goes out immediately."""

    def __init__(self, path):
        self.path = path
        self._t0 = time.monotonic()
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(TRAINING_CURVE_COLUMNS)

    def emit(self, *, seed, phase, task, env_step, effect_step,
             mean_reward=None, goal_success_rate=None, loss_total_effects=None,
             loss_vae_recon=None, loss_vae_kl=None, loss_q=None) -> None:
        if phase not in PHASES:
            raise ConfigError(f"unknown phase {phase!r}")
        if task not in TASK_LABELS:
            raise ConfigError(f"unknown task label {task!r}")
        row = (seed, phase, task, env_step, effect_step,
               f"{time.monotonic() - self._t0:.3f}",
               _fmt(mean_reward), _fmt(goal_success_rate),
               _fmt(loss_total_effects), _fmt(loss_vae_recon),
               _fmt(loss_vae_kl), _fmt(loss_q))
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)


def write_effect_counts(path, seed: int, policy: str, counts) -> None:
    """counts: mapping (effect_hash, category) -> count."""
    if policy not in POLICY_LABELS:
        raise ConfigError(f"unknown policy label {policy!r}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EFFECT_COUNTS_COLUMNS)
        for (effect_hash, category), count in sorted(counts.items()):
            writer.writerow((seed, policy, effect_hash, category, count))


def write_effect_cost(path, seed: int, rows) -> None:
    """rows: iterable of (effect_hash, category, env_step_at_0_9 or None)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EFFECT_COST_COLUMNS)
        for effect_hash, category, step in sorted(rows):
            writer.writerow((seed, effect_hash, category, _fmt(step)))


@dataclass(frozen=True)
class CurveRow:
    seed: int
    phase: str
    task: str
    env_step: int
    effect_step: int
    wall_time_s: float
    mean_reward: float | None
    goal_success_rate: float | None
    loss_total_effects: float | None
    loss_vae_recon: float | None
    loss_vae_kl: float | None
    loss_q: float | None


@dataclass(frozen=True)
class CountRow:
    seed: int
    policy: str
    effect_hash: str
    category: str
    count: int


@dataclass(frozen=True)
class CostRow:
    seed: int
    effect_hash: str
    category: str
    env_step_at_0_9: int | None


def _rows(path, expected_header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        if tuple(header) != expected_header:
            raise ConfigError(f"{path}: header {header} != {list(expected_header)}")
        for i, row in enumerate(reader, start=2):
            if len(row) != len(expected_header):
                raise ConfigError(f"{path}:{i}: expected {len(expected_header)} fields")
            yield i, row


def _opt_float(path, line, text):
    if text == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{path}:{line}: bad float {text!r}") from None


def _req_int(path, line, text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{path}:{line}: bad integer {text!r}") from None


def read_training_curve(path) -> list[CurveRow]:
    out = []
    for line, row in _rows(path, TRAINING_CURVE_COLUMNS):
        if row[1] not in PHASES:
            raise ConfigError(f"{path}:{line}: unknown phase {row[1]!r}")
        if row[2] not in TASK_LABELS:
            raise ConfigError(f"{path}:{line}: unknown task {row[2]!r}")
        out.append(CurveRow(
            seed=_req_int(path, line, row[0]), phase=row[1], task=row[2],
            env_step=_req_int(path, line, row[3]),
            effect_step=_req_int(path, line, row[4]),
            wall_time_s=float(row[5]),
            mean_reward=_opt_float(path, line, row[6]),
            goal_success_rate=_opt_float(path, line, row[7]),
            loss_total_effects=_opt_float(path, line, row[8]),
            loss_vae_recon=_opt_float(path, line, row[9]),
            loss_vae_kl=_opt_float(path, line, row[10]),
            loss_q=_opt_float(path, line, row[11]),
        ))
    return out


def read_effect_counts(path) -> list[CountRow]:
    out = []
    for line, row in _rows(path, EFFECT_COUNTS_COLUMNS):
        if row[1] not in POLICY_LABELS:
            raise ConfigError(f"{path}:{line}: unknown policy {row[1]!r}")
        if row[3] not in CATEGORIES:
            raise ConfigError(f"{path}:{line}: unknown category {row[3]!r}")
        out.append(CountRow(
            seed=_req_int(path, line, row[0]), policy=row[1], effect_hash=row[2],
            category=row[3], count=_req_int(path, line, row[4]),
        ))
    return out


def read_effect_cost(path) -> list[CostRow]:
    out = []
    for line, row in _rows(path, EFFECT_COST_COLUMNS):
        if row[2] not in CATEGORIES:
            raise ConfigError(f"{path}:{line}: unknown category {row[2]!r}")
        step = None if row[3] == "" else _req_int(path, line, row[3])
        out.append(CostRow(seed=_req_int(path, line, row[0]), effect_hash=row[1],
                           category=row[2], env_step_at_0_9=step))
    return out
