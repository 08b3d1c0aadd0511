"""Training orchestration.

Two phases run here. Unsupervised exploration: sample candidate effects
from the generative model, chase one at a time with the effect-conditioned
policy, and feed everything that happens back into the shared replay
(with hindsight twins and rarity priorities) while the dynamics model, the
effect distribution and the policy train on their own schedule rows. Task
learning: the exploration-phase models are frozen, goals are picked by the
task value function over sampled candidates, and only that value function
trains, on accumulated environment reward across effect steps.

Effect steps and environment steps are separate clocks: one effect step is
the run of env steps (at most K + 1) spent pursuing a single goal.
"""
from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .effectdist import EffectVae
from .effects import TotalEffectsModel, controlled_effect, discretize, has_achieved
from .errors import ConfigError, UsageError
from .gridworld import GridWorld, classify_effect, effect_key
from .policies import (
    EPSILON_SET,
    EPSILON_WARMUP_SET,
    BaselineQNet,
    EffectQNet,
    FixedEpsilonSet,
    LinearDecay,
    TaskQNet,
    uniform_goal,
)
from .replay import (
    ExplorationExperience,
    RarityEstimator,
    SharedReplay,
    TaskExperience,
    Transition,
    her_augment,
)

MODEL_DYNAMICS = "dynamics"
MODEL_VAE = "vae"
MODEL_POLICY = "policy"

EXPLORE_CONSUMERS = ("total_effects", "effect_dist", "policy")


@dataclass(frozen=True)
class ScheduleRow:
    models: frozenset
    first: int
    repeat: int
    warmup: bool


DEFAULT_SCHEDULE = (
    ScheduleRow(frozenset({MODEL_DYNAMICS}), 90_000, 0, True),
    ScheduleRow(frozenset({MODEL_DYNAMICS, MODEL_VAE}), 30_000, 0, True),
    ScheduleRow(frozenset({MODEL_DYNAMICS, MODEL_POLICY}), 30_000, 0, False),
    ScheduleRow(frozenset({MODEL_DYNAMICS, MODEL_VAE}), 10_000, 10_000, False),
    ScheduleRow(frozenset({MODEL_POLICY}), 60_000, 60_000, False),
)


def scale_schedule(rows, scale: float):
    """Shrink or stretch every row budget, keeping at least one step."""
    if scale == 1.0:
        return tuple(rows)
    out = []
    for row in rows:
        first = max(1, round(row.first * scale)) if row.first else 0
        repeat = max(1, round(row.repeat * scale)) if row.repeat else 0
        out.append(ScheduleRow(row.models, first, repeat, row.warmup))
    return tuple(out)


def drop_models(rows, drop: frozenset):
    """Remove models from every row; rows left empty disappear."""
    out = []
    for row in rows:
        models = row.models - drop
        if models:
            out.append(ScheduleRow(models, row.first, row.repeat, row.warmup))
    if not out:
        raise ConfigError("schedule has no rows left")
    return tuple(out)


class Schedule:
    """Walks the row table: one full first pass, then the repeat budgets cycle."""

    def __init__(self, rows=DEFAULT_SCHEDULE):
        self.rows = tuple(rows)
        if not self.rows:
            raise ConfigError("schedule needs at least one row")
        self._pass = 0
        self._row = 0
        self._into = 0
        self._skip_empty()

    def _budget(self, row_index: int) -> int:
        row = self.rows[row_index]
        return row.first if self._pass == 0 else row.repeat

    def _skip_empty(self) -> None:
        guard = 0
        while self._budget(self._row) == 0:
            self._step_row()
            guard += 1
            if guard > 2 * len(self.rows):
                # nothing left to cycle; pin to the последний row with any budget
                self._row = len(self.rows) - 1
                break

    def _step_row(self) -> None:
        self._row += 1
        self._into = 0
        if self._row >= len(self.rows):
            self._row = 0
            self._pass += 1
            if all(r.repeat == 0 for r in self.rows):
                self._row = len(self.rows) - 1  # stay on the final row forever

    @property
    def active_models(self) -> frozenset:
        return self.rows[self._row].models

    @property
    def warmup(self) -> bool:
        return self.rows[self._row].warmup

    def advance(self, n: int = 1) -> None:
        for _ in range(n):
            self._into += 1
            if self._into >= self._budget(self._row):
                self._step_row()
                self._skip_empty()


@dataclass(frozen=True)
class PhaseParams:
    k_max_actions: int = 50
    n_candidates: int = 20
    punishment: float = -0.02
    batch_size: int = 128
    train_frequency: int = 5
    gamma: float = 0.85
    dynamics_lr: float = 5e-4
    vae_lr: float = 1e-3
    policy_lr: float = 1e-4
    task_lr: float = 1e-3
    baseline_lr: float = 5e-5
    explore_capacity: int = 500_000
    task_capacity: int = 100_000
    per_alpha: float = 1.0
    per_beta: float = 0.01
    eps_set: tuple = EPSILON_SET
    eps_warmup_set: tuple = EPSILON_WARMUP_SET
    metrics_interval: int = 1000


@dataclass
class Components:
    dynamics: TotalEffectsModel
    vae: EffectVae
    policy: EffectQNet
    bounds: np.ndarray


class EffectComputer:
    """Where per-step effects come from: learned model, oracle, or raw totals."""

    MODES = ("learned", "oracle", "total")

    def __init__(self, mode: str, dynamics: TotalEffectsModel | None, bounds: np.ndarray):
        if mode not in self.MODES:
            raise ConfigError(f"effects mode must be one of {self.MODES}, got {mode!r}")
        if mode == "learned" and dynamics is None:
            raise ConfigError("learned effects mode needs a dynamics model")
        self.mode = mode
        self.dynamics = dynamics
        self.bounds = bounds

    def step_effect(self, env: GridWorld, s_prev: np.ndarray, s: np.ndarray,
                    action: int, s_next: np.ndarray) -> np.ndarray:
        """Effect credited to `action`; call with the pre-step snapshot values."""
        if self.mode == "total":
            return (s_next - s).astype(np.int32)
        if self.mode == "oracle":
            per_action = self._oracle_cache
        else:
            per_action = discretize(self.dynamics.predict_all(s_prev, s), self.bounds)
        return controlled_effect(per_action, action)

    def pre_step(self, env: GridWorld) -> None:
        """Capture anything that must be read before the env advances."""
        if self.mode == "oracle":
            self._oracle_cache = env.oracle_total_effects()


class WindowStats:
    """Trailing windows feeding the telemetry rows."""

    def __init__(self):
        self.episode_returns = deque(maxlen=50)
        self.goal_results = deque(maxlen=200)
        self.losses = {"total_effects": None, "vae_recon": None, "vae_kl": None, "q": None}

    @property
    def mean_reward(self):
        if not self.episode_returns:
            return None
        return float(np.mean(self.episode_returns))

    @property
    def goal_success_rate(self):
        if not self.goal_results:
            return None
        return float(np.mean(self.goal_results))


class GoalSuccessTracker:
    """Rolling per-goal success, and when each goal first clears a threshold."""

    def __init__(self, window: int = 20, threshold: float = 0.9):
        self.window = window
        self.threshold = threshold
        self._results: dict[str, deque] = {}
        self._category: dict[str, str] = {}
        self.crossing_step: dict[str, int] = {}
        self.attempts: Counter = Counter()

    def record(self, goal: np.ndarray, achieved: bool, env_step: int) -> None:
        key = effect_key(goal)
        if key not in self._results:
            self._results[key] = deque(maxlen=self.window)
            self._category[key] = classify_effect(goal)
        self.attempts[key] += 1
        results = self._results[key]
        results.append(bool(achieved))
        if (key not in self.crossing_step and len(results) == self.window
                and np.mean(results) >= self.threshold):
            self.crossing_step[key] = env_step

    def category(self, key: str) -> str:
        return self._category[key]

    def keys(self):
        return list(self._results)


class PickSuccessTracker:
    """Rolling success of ball-pick goals (agent starts carrying)."""

    def __init__(self, carry_index: int, window: int = 200, threshold: float = 0.5):
        self.carry_index = carry_index
        self.window = window
        self.threshold = threshold
        self.results = deque(maxlen=window)
        self.crossing_step: int | None = None
        self.pick_attempts = 0

    def record(self, goal: np.ndarray, achieved: bool, env_step: int) -> None:
        if goal[self.carry_index] != 1:
            return
        self.pick_attempts += 1
        self.results.append(bool(achieved))
        if (self.crossing_step is None and len(self.results) >= self.window // 2
                and np.mean(self.results) >= self.threshold):
            self.crossing_step = env_step

    @property
    def rate(self) -> float:
        if not self.results:
            return 0.0
        return float(np.mean(self.results))


def _stack_states(rows) -> np.ndarray:
    return np.stack([np.asarray(r, dtype=np.int64) for r in rows])


def train_dynamics(model: TotalEffectsModel, replay: SharedReplay, batch: int,
                   lr: float, rng: np.random.Generator) -> float:
    exps, weights, ids = replay.sample("total_effects", batch, rng)
    prev = _stack_states([e.s_prev for e in exps])
    cur = _stack_states([e.s for e in exps])
    actions = np.array([e.a for e in exps])
    targets = np.stack([
        np.asarray(e.s_next, dtype=np.float32) - np.asarray(e.s, dtype=np.float32)
        for e in exps
    ])
    loss, per_sample, _ = model.train_step(prev, cur, actions, targets, lr, weights=weights)
    replay.update_priorities("total_effects", ids, per_sample)
    return loss


def train_vae(vae: EffectVae, replay: SharedReplay, batch: int, lr: float,
              rng: np.random.Generator) -> tuple[float, float]:
    exps, weights, ids = replay.sample("effect_dist", batch, rng)
    effects = np.stack([np.asarray(e.e_step, dtype=np.int64) for e in exps])
    recon, kl, per_sample, _ = vae.elbo_step(effects, lr, rng, weights=weights)
    replay.update_priorities("effect_dist", ids, per_sample)
    return recon, kl


def train_policy(policy: EffectQNet, replay: SharedReplay, batch: int, gamma: float,
                 lr: float, rng: np.random.Generator) -> float:
    exps, weights, ids = replay.sample("policy", batch, rng)
    td, _ = policy.train_step(
        states=_stack_states([e.s for e in exps]),
        e_goals=np.stack([np.asarray(e.e_goal, dtype=np.float32) for e in exps]),
        actions=np.array([e.a for e in exps]),
        next_states=_stack_states([e.s_next for e in exps]),
        rewards=np.array([e.r_prime for e in exps]),
        dones=np.array([float(e.d_prime) for e in exps]),
        weights=weights, gamma=gamma, lr=lr,
    )
    replay.update_priorities("policy", ids, td)
    return float(np.mean(td * td))


def run_exploration(env: GridWorld, comps: Components, schedule: Schedule,
                    budget: int, params: PhaseParams, rng: np.random.Generator,
                    effects_mode: str = "learned", sink=None, seed: int = 0,
                    task: str | None = None, goal_tracker=None,
                    pick_tracker=None, probe=None, checkpoint_cb=None,
                    checkpoint_interval: int = 50_000,
                    replay: SharedReplay | None = None) -> SharedReplay:
    """Unsupervised exploration; trains the components in place."""
    if replay is None:
        replay = SharedReplay(params.explore_capacity, EXPLORE_CONSUMERS,
                              alpha=params.per_alpha, beta=params.per_beta)
    rarity = RarityEstimator()
    computer = EffectComputer(effects_mode, comps.dynamics, comps.bounds)
    warm = FixedEpsilonSet(params.eps_warmup_set)
    main = FixedEpsilonSet(params.eps_set)
    stats = WindowStats()
    task_name = task or env.config.task

    env_step = 0
    effect_step = 0
    episode_return = 0.0
    s = env.reset(int(rng.integers(2**63))) if env.done else env.state
    s_flat = s.flatten()
    s_prev_flat = s_flat

    while env_step < budget:
        candidates = comps.vae.sample(params.n_candidates, rng)
        goal = candidates[uniform_goal(candidates, rng)].astype(np.int32)
        eps = (warm if schedule.warmup else main).draw(rng)
        d_prime = False
        achieved = False
        t_goal = 0
        while not d_prime and env_step < budget:
            action = comps.policy.select(s_flat, goal, eps, rng)
            computer.pre_step(env)
            res = env.step(action)
            s_next_flat = res.next_state.flatten()
            e_step = computer.step_effect(env, s_prev_flat, s_flat, action, s_next_flat)
            achieved = has_achieved(e_step, goal)
            t_goal += 1
            d_prime = res.done or (t_goal > params.k_max_actions) or achieved
            r_prime = 1.0 if achieved else params.punishment

            exp = ExplorationExperience(
                s_prev=s_prev_flat.astype(np.int8), s=s_flat.astype(np.int8),
                a=action, s_next=s_next_flat.astype(np.int8),
                e_goal=goal.astype(np.int8), e_step=e_step.astype(np.int8),
                r_prime=r_prime, d_prime=d_prime,
            )
            priority = rarity.rarity(e_step)
            replay.push(exp, priority)
            replay.push(her_augment(exp), priority)

            env_step += 1
            episode_return += res.reward
            schedule.advance(1)

            if env_step % params.train_frequency == 0 and len(replay) >= params.batch_size:
                active = schedule.active_models
                if probe is not None:
                    probe(env_step, active, eps)
                if MODEL_DYNAMICS in active:
                    stats.losses["total_effects"] = train_dynamics(
                        comps.dynamics, replay, params.batch_size, params.dynamics_lr, rng)
                if MODEL_VAE in active:
                    recon, kl = train_vae(
                        comps.vae, replay, params.batch_size, params.vae_lr, rng)
                    stats.losses["vae_recon"], stats.losses["vae_kl"] = recon, kl
                if MODEL_POLICY in active:
                    stats.losses["q"] = train_policy(
                        comps.policy, replay, params.batch_size, params.gamma,
                        params.policy_lr, rng)

            if sink is not None and env_step % params.metrics_interval == 0:
                sink.emit(seed=seed, phase="explore", task=task_name,
                          env_step=env_step, effect_step=effect_step,
                          mean_reward=stats.mean_reward,
                          goal_success_rate=stats.goal_success_rate,
                          loss_total_effects=stats.losses["total_effects"],
                          loss_vae_recon=stats.losses["vae_recon"],
                          loss_vae_kl=stats.losses["vae_kl"],
                          loss_q=stats.losses["q"])
            if checkpoint_cb is not None and env_step % checkpoint_interval == 0:
                checkpoint_cb(env_step)

            s_prev_flat = s_flat
            s_flat = s_next_flat
            if res.done:
                stats.episode_returns.append(episode_return)
                episode_return = 0.0
                s = env.reset(int(rng.integers(2**63)))
                s_flat = s.flatten()
                s_prev_flat = s_flat

        effect_step += 1
        stats.goal_results.append(achieved)
        if goal_tracker is not None:
            goal_tracker.record(goal, achieved, env_step)
        if pick_tracker is not None:
            pick_tracker.record(goal, achieved, env_step)
    return replay


def train_task_q(qt: TaskQNet, replay: SharedReplay, batch: int, gamma: float,
                 lr: float, rng: np.random.Generator) -> float:
    exps, weights, ids = replay.sample("policy", batch, rng)
    td, _ = qt.train_step(exps, gamma=gamma, lr=lr, weights=weights)
    replay.update_priorities("policy", ids, td)
    return float(np.mean(td * td))


def run_task(env: GridWorld, comps: Components, qt: TaskQNet, budget: int,
             params: PhaseParams, rng: np.random.Generator,
             effects_mode: str = "learned", sink=None, seed: int = 0,
             eps_decay: LinearDecay | None = None, train: bool = True,
             goal_counter: Counter | None = None,
             replay: SharedReplay | None = None) -> WindowStats:
    """Task phase: frozen exploration models, train (or just run) the task policy.

    `budget` counts effect steps. With train=False this is a greedy
    evaluation loop (used by the hierarchy-usage census).
    """
    if eps_decay is None:
        eps_decay = LinearDecay()
    if replay is None:
        replay = SharedReplay(params.task_capacity, ("policy",),
                              alpha=params.per_alpha, beta=params.per_beta)
    computer = EffectComputer(effects_mode, comps.dynamics, comps.bounds)
    stats = WindowStats()
    frozen = (comps.dynamics.params.checksum(), comps.vae.params.checksum(),
              comps.policy.online.checksum())

    env_step = 0
    effect_step = 0
    reward_acc = 0.0
    episode_return = 0.0
    pending = None
    s_flat = (env.reset(int(rng.integers(2**63))) if env.done else env.state).flatten()
    s_prev_flat = s_flat

    while effect_step < budget:
        candidates = comps.vae.sample(params.n_candidates, rng)
        if pending is not None:
            s_goal, goal, s_end, r_stored, h_flag, done_flag = pending
            if h_flag:
                next_cands = (np.zeros((0, comps.bounds.size), dtype=np.int8)
                              if done_flag else candidates.astype(np.int8))
                replay.push(TaskExperience(
                    s_goal=s_goal, e_goal=goal, s_next=s_end,
                    next_candidates=next_cands, r_prime=r_stored,
                    done=done_flag), 1.0)
            pending = None

        eps = eps_decay.value(effect_step) if train else 0.0
        pick = qt.select(s_flat, candidates.astype(np.float32), eps, rng)
        goal = candidates[pick].astype(np.int32)
        if goal_counter is not None:
            goal_counter[(effect_key(goal), classify_effect(goal))] += 1

        s_goal_flat = s_flat
        t_goal = 0
        d_prime = False
        achieved = False
        env_done = False
        while not d_prime:
            action = comps.policy.select(s_flat, goal, 0.0, rng)
            computer.pre_step(env)
            res = env.step(action)
            s_next_flat = res.next_state.flatten()
            e_step = computer.step_effect(env, s_prev_flat, s_flat, action, s_next_flat)
            achieved = has_achieved(e_step, goal)
            t_goal += 1
            env_step += 1
            reward_acc += res.reward
            episode_return += res.reward
            env_done = res.done
            d_prime = env_done or (t_goal > params.k_max_actions) or achieved
            s_prev_flat = s_flat
            s_flat = s_next_flat
            if sink is not None and env_step % params.metrics_interval == 0:
                sink.emit(seed=seed, phase="task", task=env.config.task,
                          env_step=env_step, effect_step=effect_step,
                          mean_reward=stats.mean_reward,
                          goal_success_rate=stats.goal_success_rate,
                          loss_q=stats.losses["q"])

        stats.goal_results.append(achieved)
        pending = (s_goal_flat.astype(np.int8), goal.astype(np.int8),
                   s_flat.astype(np.int8), reward_acc, achieved, env_done)
        if achieved:
            reward_acc = 0.0
        effect_step += 1

        if train and effect_step % params.train_frequency == 0 and len(replay) >= params.batch_size:
            stats.losses["q"] = train_task_q(
                qt, replay, params.batch_size, params.gamma, params.task_lr, rng)

        if env_done:
            stats.episode_returns.append(episode_return)
            episode_return = 0.0
            reward_acc = 0.0
            s_flat = env.reset(int(rng.integers(2**63))).flatten()
            s_prev_flat = s_flat

    after = (comps.dynamics.params.checksum(), comps.vae.params.checksum(),
             comps.policy.online.checksum())
    if frozen != after:
        raise UsageError("frozen components were mutated during the task phase")
    return stats


def run_baseline(env: GridWorld, net: BaselineQNet, budget: int, params: PhaseParams,
                 rng: np.random.Generator, capacity: int = 500_000, sink=None,
                 seed: int = 0) -> WindowStats:
    """Flat DQN at env-step timescale: fixed epsilon set, no warmup."""
    replay = SharedReplay(capacity, ("policy",),
                          alpha=params.per_alpha, beta=params.per_beta)
    scheme = FixedEpsilonSet(params.eps_set)
    stats = WindowStats()
    env_step = 0
    while env_step < budget:
        s_flat = env.reset(int(rng.integers(2**63))).flatten()
        eps = scheme.draw(rng)
        episode_return = 0.0
        while True:
            action = net.select(s_flat, eps, rng)
            res = env.step(action)
            next_flat = res.next_state.flatten()
            replay.push(Transition(s_flat.astype(np.int8), action, res.reward,
                                   next_flat.astype(np.int8), res.done), 1.0)
            episode_return += res.reward
            env_step += 1
            s_flat = next_flat
            if env_step % params.train_frequency == 0 and len(replay) >= params.batch_size:
                exps, weights, ids = replay.sample("policy", params.batch_size, rng)
                td, _ = net.train_step(
                    states=_stack_states([t.s for t in exps]),
                    actions=np.array([t.a for t in exps]),
                    rewards=np.array([t.r for t in exps]),
                    next_states=_stack_states([t.s_next for t in exps]),
                    dones=np.array([float(t.done) for t in exps]),
                    weights=weights, gamma=params.gamma, lr=params.baseline_lr,
                )
                replay.update_priorities("policy", ids, td)
                stats.losses["q"] = float(np.mean(td * td))
            if sink is not None and env_step % params.metrics_interval == 0:
                sink.emit(seed=seed, phase="baseline", task=env.config.task,
                          env_step=env_step, effect_step=env_step,
                          mean_reward=stats.mean_reward,
                          loss_q=stats.losses["q"])
            if res.done or env_step >= budget:
                break
        stats.episode_returns.append(episode_return)
    return stats


def record_effect_census(env: GridWorld, steps: int, rng: np.random.Generator,
                         comps: Components | None = None,
                         effects_mode: str = "learned",
                         params: PhaseParams | None = None) -> Counter:
    """Count the oracle controlled effect of every action actually taken.

    With `comps` the acting policy is random-effect exploration (frozen
    models, no training); without it, uniformly random actions.
    """
    params = params or PhaseParams()
    counts: Counter = Counter()
    env_step = 0
    s_flat = (env.reset(int(rng.integers(2**63))) if env.done else env.state).flatten()
    s_prev_flat = s_flat
    computer = (EffectComputer(effects_mode, comps.dynamics, comps.bounds)
                if comps is not None else None)
    main = FixedEpsilonSet(params.eps_set)

    goal = None
    eps = 0.0
    t_goal = 0
    while env_step < steps:
        if comps is not None and goal is None:
            candidates = comps.vae.sample(params.n_candidates, rng)
            goal = candidates[uniform_goal(candidates, rng)].astype(np.int32)
            eps = main.draw(rng)
            t_goal = 0
        if comps is not None:
            action = comps.policy.select(s_flat, goal, eps, rng)
        else:
            action = int(rng.integers(6))

        per_oracle = env.oracle_total_effects()
        e_oracle = controlled_effect(per_oracle, action)
        counts[(effect_key(e_oracle), classify_effect(e_oracle))] += 1

        if computer is not None:
            computer.pre_step(env)
        res = env.step(action)
        s_next_flat = res.next_state.flatten()
        if comps is not None:
            e_step = computer.step_effect(env, s_prev_flat, s_flat, action, s_next_flat)
            t_goal += 1
            if res.done or t_goal > params.k_max_actions or has_achieved(e_step, goal):
                goal = None
        env_step += 1
        s_prev_flat = s_flat
        s_flat = s_next_flat
        if res.done:
            s_flat = env.reset(int(rng.integers(2**63))).flatten()
            s_prev_flat = s_flat
            goal = None
    return counts
