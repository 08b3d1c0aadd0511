"""Run configuration: defaults, JSON config files, and component builders.

Every hyperparameter default below reproduces the published table values
verbatim; a test pins the whole map. Config files are flat JSON objects
whose keys must match field names exactly (unknown keys are rejected);
command-line flags override file values.

One root seed drives everything. Component seeds derive from it by hashing
"<root>/<component name>" with SHA-256 and taking the first eight bytes,
so runs are reproducible and components are decorrelated.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .effectdist import EffectVae
from .effects import TotalEffectsModel, effect_bounds
from .errors import ConfigError
from .gridworld import EnvConfig, GridWorld
from .policies import BaselineQNet, EffectQNet, TaskQNet
from .trainer import (
    DEFAULT_SCHEDULE,
    MODEL_DYNAMICS,
    Components,
    PhaseParams,
    Schedule,
    drop_models,
    scale_schedule,
)


def seed_for(root: int, name: str) -> int:
    digest = hashlib.sha256(f"{root}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RunConfig:
    # environment
    grid_size: int = 8
    task: str = "T"
    demon_count: int = 0
    demon_dynamics: str = "static"
    max_episode_steps: int = 100
    # common hyperparameters
    batch_size: int = 128
    per_alpha: float = 1.0
    per_beta: float = 0.01
    discount: float = 0.85
    train_frequency: int = 5
    n_candidates: int = 20
    punishment: float = -0.02
    k_max_actions: int = 50
    # task-agnostic training
    explore_capacity: int = 500_000
    eps_warmup_set: tuple = (1.0,)
    eps_set: tuple = (0.8, 0.6, 0.4, 0.2, 0.1, 0.01)
    state_encoder_units: int = 128
    state_encoder_latent: int = 32
    effect_encoder_units: int = 256
    effect_encoder_latent: int = 12
    q_effect_units: int = 512
    q_effect_lr: float = 0.0001
    q_effect_target_update: int = 15_000
    vae_encoder_units: tuple = (256, 128, 64)
    vae_decoder_units: tuple = (64, 128, 256)
    vae_latent: int = 8
    vae_lr: float = 0.001
    dynamics_lr: float = 0.0005
    dynamics_units: int = 32
    # task-specific training
    task_capacity: int = 100_000
    q_task_units: int = 32
    q_task_lr: float = 0.001
    q_task_target_update: int = 2_000
    q_task_eps_start: float = 1.0
    q_task_eps_end: float = 0.0
    q_task_eps_steps: int = 50_000
    # baseline
    baseline_capacity: int = 500_000
    baseline_state_encoder_units: int = 256
    baseline_state_encoder_latent: int = 12
    baseline_units: int = 256
    baseline_lr: float = 0.00005
    baseline_target_update: int = 15_000
    # artifact plumbing (desk-scale budgets; all overridable)
    embedding_dim: int = 8
    seeds: tuple = (0, 1, 2)
    out_dir: str = "runs"
    effects_mode: str = "learned"
    explore_budget: int = 300_000
    task_budget: int = 50_000
    census_budget: int = 100_000
    dynamics_budget: int = 150_000
    usage_budget: int = 2_000
    schedule_scale: float = 1.0
    metrics_interval: int = 1000
    checkpoint_interval: int = 50_000

    def __post_init__(self):
        if self.effects_mode not in ("learned", "oracle", "total"):
            raise ConfigError(f"unknown effects_mode {self.effects_mode!r}")
        EnvConfig(grid_size=self.grid_size, task=self.task,
                  demon_count=self.demon_count, demon_dynamics=self.demon_dynamics,
                  max_episode_steps=self.max_episode_steps)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TUPLE_FIELDS = {"eps_warmup_set", "eps_set", "vae_encoder_units",
                 "vae_decoder_units", "seeds"}


def config_from_mapping(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    coerced = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{key} must be a list")
            coerced[key] = tuple(value)
        else:
            coerced[key] = value
    try:
        return RunConfig(**coerced)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_mapping(data)


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    changes = {k: v for k, v in overrides.items() if v is not None}
    if not changes:
        return cfg
    merged = dataclasses.asdict(cfg)
    merged.update(changes)
    return config_from_mapping(merged)


# -- builders -----------------------------------------------------------------


def build_env(cfg: RunConfig) -> GridWorld:
    return GridWorld(EnvConfig(
        grid_size=cfg.grid_size, task=cfg.task, demon_count=cfg.demon_count,
        demon_dynamics=cfg.demon_dynamics, max_episode_steps=cfg.max_episode_steps))


def build_components(cfg: RunConfig, seed: int) -> Components:
    n_entities = 4 + cfg.demon_count
    bounds = effect_bounds(cfg.grid_size, n_entities)
    dynamics = TotalEffectsModel(
        cfg.grid_size, n_entities,
        np.random.default_rng(seed_for(seed, "dynamics-init")),
        state_units=cfg.state_encoder_units, state_latent=cfg.state_encoder_latent,
        units=cfg.dynamics_units, emb_dim=cfg.embedding_dim)
    vae = EffectVae(
        bounds, np.random.default_rng(seed_for(seed, "vae-init")),
        latent=cfg.vae_latent, enc_units=cfg.vae_encoder_units,
        dec_units=cfg.vae_decoder_units)
    policy = EffectQNet(
        cfg.grid_size, n_entities,
        np.random.default_rng(seed_for(seed, "policy-init")),
        state_units=cfg.state_encoder_units, state_latent=cfg.state_encoder_latent,
        effect_units=cfg.effect_encoder_units, effect_latent=cfg.effect_encoder_latent,
        trunk_units=cfg.q_effect_units, target_interval=cfg.q_effect_target_update,
        emb_dim=cfg.embedding_dim)
    return Components(dynamics=dynamics, vae=vae, policy=policy, bounds=bounds)


def build_task_net(cfg: RunConfig, seed: int) -> TaskQNet:
    return TaskQNet(
        cfg.grid_size, 4 + cfg.demon_count,
        np.random.default_rng(seed_for(seed, "task-init")),
        state_units=cfg.state_encoder_units, state_latent=cfg.state_encoder_latent,
        effect_units=cfg.effect_encoder_units, effect_latent=cfg.effect_encoder_latent,
        trunk_units=cfg.q_task_units, target_interval=cfg.q_task_target_update,
        emb_dim=cfg.embedding_dim)


def build_baseline(cfg: RunConfig, seed: int) -> BaselineQNet:
    return BaselineQNet(
        cfg.grid_size, 4 + cfg.demon_count,
        np.random.default_rng(seed_for(seed, "baseline-init")),
        state_units=cfg.baseline_state_encoder_units,
        state_latent=cfg.baseline_state_encoder_latent,
        trunk_units=cfg.baseline_units, target_interval=cfg.baseline_target_update,
        emb_dim=cfg.embedding_dim)


def build_schedule(cfg: RunConfig) -> Schedule:
    rows = scale_schedule(DEFAULT_SCHEDULE, cfg.schedule_scale)
    if cfg.effects_mode == "total":
        rows = drop_models(rows, frozenset({MODEL_DYNAMICS}))
    return Schedule(rows)


def phase_params(cfg: RunConfig) -> PhaseParams:
    return PhaseParams(
        k_max_actions=cfg.k_max_actions, n_candidates=cfg.n_candidates,
        punishment=cfg.punishment, batch_size=cfg.batch_size,
        train_frequency=cfg.train_frequency, gamma=cfg.discount,
        dynamics_lr=cfg.dynamics_lr, vae_lr=cfg.vae_lr,
        policy_lr=cfg.q_effect_lr, task_lr=cfg.q_task_lr,
        baseline_lr=cfg.baseline_lr, explore_capacity=cfg.explore_capacity,
        task_capacity=cfg.task_capacity, per_alpha=cfg.per_alpha,
        per_beta=cfg.per_beta, eps_set=cfg.eps_set,
        eps_warmup_set=cfg.eps_warmup_set, metrics_interval=cfg.metrics_interval)
