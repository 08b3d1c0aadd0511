"""Q-functions: the effect-conditioned policy, the task policy over
candidate effects, and the flat baseline.

All three are dueling double-DQN variants sharing the same building
blocks: an embedding state encoder, a dense effect encoder where effects
are part of the input, a ReLU trunk, and value/advantage heads (the task
net has a single scalar head since its "actions" are whatever candidate
effects were sampled). Greedy ties break toward the lowest index so tests
can pin behavior exactly.
"""
from __future__ import annotations

import numpy as np

from .errors import UsageError
from . import nncore
from .effects import state_encoder_spec
from .gridworld import N_ACTIONS, N_ATTRIBUTES
from .nncore import DenseSpec, MlpSpec, ParamSet

ARCH_Q_EFFECT = "q_effect_v1"
ARCH_Q_TASK = "q_task_v1"
ARCH_Q_BASELINE = "q_baseline_v1"

EPSILON_SET = (0.8, 0.6, 0.4, 0.2, 0.1, 0.01)
EPSILON_WARMUP_SET = (1.0,)


class FixedEpsilonSet:
    """Ape-X style exploration: one constant epsilon drawn per episode."""

    def __init__(self, values=EPSILON_SET):
        if not values:
            raise UsageError("epsilon set cannot be empty")
        self.values = tuple(float(v) for v in values)

    def draw(self, rng: np.random.Generator) -> float:
        return self.values[rng.integers(len(self.values))]


class LinearDecay:
    """Linear epsilon schedule over a fixed number of steps."""

    def __init__(self, start: float = 1.0, end: float = 0.0, steps: int = 50_000):
        self.start = start
        self.end = end
        self.steps = steps

    def value(self, step: int) -> float:
        if step >= self.steps:
            return self.end
        frac = step / self.steps
        return self.start + (self.end - self.start) * frac


def effect_encoder_spec(name: str, p: int, units: int, latent: int) -> MlpSpec:
    return MlpSpec(name, p, (DenseSpec(units, "relu"), DenseSpec(latent, "linear")))


class _DuelingCore:
    """Shared forward/backward for encoder(s) + trunk + dueling heads."""

    def __init__(self):
        self.online = ParamSet()
        self.target = ParamSet()
        self.train_steps = 0
        self.skipped_updates = 0

    def _init_target(self):
        self.target = self.online.copy()

    def _sync_if_due(self):
        if self.train_steps % self.target_interval == 0:
            nncore.sync_target(self.online, self.target)

    def save(self, path):
        nncore.save_checkpoint(path, self.arch, self.widths, self.online)

    def load(self, path):
        _, _, params = nncore.load_checkpoint(path, expect_arch=self.arch,
                                              expect_widths=self.widths)
        self.online = params
        self.target = params.copy()


class EffectQNet(_DuelingCore):
    """Q(s, goal effect, action): how to perform a given effect."""

    arch = ARCH_Q_EFFECT

    def __init__(self, grid_size: int, n_entities: int, rng: np.random.Generator,
                 state_units: int = 128, state_latent: int = 32,
                 effect_units: int = 256, effect_latent: int = 12,
                 trunk_units: int = 512, target_interval: int = 15_000,
                 emb_dim: int = 8):
        super().__init__()
        self.p = n_entities * N_ATTRIBUTES
        self.target_interval = target_interval
        self.senc = state_encoder_spec("senc", grid_size, n_entities,
                                       state_units, state_latent, emb_dim)
        self.eenc = effect_encoder_spec("eenc", self.p, effect_units, effect_latent)
        joined = state_latent + effect_latent
        self.trunk = MlpSpec("trunk", joined, tuple(
            DenseSpec(trunk_units, "relu") for _ in range(4)))
        self.value_head = MlpSpec("value", trunk_units, (DenseSpec(1, "linear"),))
        self.adv_head = MlpSpec("adv", trunk_units, (DenseSpec(N_ACTIONS, "linear"),))
        for spec in (self.senc, self.eenc, self.trunk, self.value_head, self.adv_head):
            nncore.init_mlp(spec, self.online, rng)
        self._init_target()

    @property
    def widths(self):
        return (self.senc.widths + self.eenc.widths + self.trunk.widths
                + self.value_head.widths + self.adv_head.widths)

    def _forward(self, params: ParamSet, states: np.ndarray, effects: np.ndarray):
        slat, tape_s = nncore.forward(self.senc, params, states)
        elat, tape_e = nncore.forward(self.eenc, params, effects)
        joined = np.concatenate([slat, elat], axis=1)
        t, tape_t = nncore.forward(self.trunk, params, joined)
        v, tape_v = nncore.forward(self.value_head, params, t)
        a, tape_a = nncore.forward(self.adv_head, params, t)
        q = v + a - a.mean(axis=1, keepdims=True)
        tapes = (tape_s, tape_e, tape_t, tape_v, tape_a, slat.shape[1])
        return q, v, tapes

    def _backward(self, params: ParamSet, tapes, dq: np.ndarray):
        tape_s, tape_e, tape_t, tape_v, tape_a, s_latent = tapes
        dv = dq.sum(axis=1, keepdims=True)
        da = dq - dq.mean(axis=1, keepdims=True)
        grads, dt_v = nncore.backward(self.value_head, params, tape_v, dv)
        _, dt_a = nncore.backward(self.adv_head, params, tape_a, da, into=grads)
        _, djoined = nncore.backward(self.trunk, params, tape_t, dt_v + dt_a, into=grads)
        nncore.backward(self.senc, params, tape_s, djoined[:, :s_latent], into=grads)
        nncore.backward(self.eenc, params, tape_e, djoined[:, s_latent:], into=grads)
        return grads

    def q_values(self, states: np.ndarray, effects: np.ndarray,
                 params: ParamSet | None = None) -> np.ndarray:
        q, _, _ = self._forward(params or self.online,
                                np.atleast_2d(states).astype(np.int64),
                                np.atleast_2d(effects).astype(nncore.DTYPE))
        return q

    def state_value(self, states, effects) -> np.ndarray:
        _, v, _ = self._forward(self.online,
                                np.atleast_2d(states).astype(np.int64),
                                np.atleast_2d(effects).astype(nncore.DTYPE))
        return v[:, 0]

    def select(self, state: np.ndarray, e_goal: np.ndarray, eps: float,
               rng: np.random.Generator) -> int:
        """Epsilon-greedy action for one state and goal effect."""
        if not 0.0 <= eps <= 1.0:
            raise UsageError(f"epsilon must be in [0, 1], got {eps}")
        if eps > 0.0 and rng.random() < eps:
            return int(rng.integers(N_ACTIONS))
        q = self.q_values(state[None, :], e_goal[None, :])
        return int(np.argmax(q[0]))

    def loss_and_grads(self, params: ParamSet, states, effects, actions, targets, weights):
        q, _, tapes = self._forward(params, states, effects)
        batch = q.shape[0]
        taken = q[np.arange(batch), actions]
        td = taken - targets
        loss = float(np.mean(weights * td * td))
        dq = np.zeros_like(q)
        dq[np.arange(batch), actions] = (2.0 / batch) * weights * td
        grads = self._backward(params, tapes, dq)
        return loss, grads, td

    def train_step(self, states, e_goals, actions, next_states, rewards, dones,
                   weights, gamma: float, lr: float):
        """Double-Q update on the taken actions; returns (|td|, applied)."""
        states = np.asarray(states, dtype=np.int64)
        next_states = np.asarray(next_states, dtype=np.int64)
        e_goals = np.asarray(e_goals, dtype=nncore.DTYPE)
        actions = np.asarray(actions, dtype=np.int64)
        rewards = np.asarray(rewards, dtype=np.float64)
        dones = np.asarray(dones, dtype=np.float64)
        weights = np.asarray(weights, dtype=nncore.DTYPE)

        q_next_online, _, _ = self._forward(self.online, next_states, e_goals)
        best_next = np.argmax(q_next_online, axis=1)
        q_next_target, _, _ = self._forward(self.target, next_states, e_goals)
        bootstrap = q_next_target[np.arange(len(best_next)), best_next]
        targets = (rewards + (1.0 - dones) * gamma * bootstrap).astype(nncore.DTYPE)

        loss, grads, td = self.loss_and_grads(
            self.online, states, e_goals, actions, targets, weights)
        applied = False
        if np.isfinite(loss):
            applied = nncore.adam_step(self.online, grads, lr)
        if applied:
            self.train_steps += 1
            self._sync_if_due()
        else:
            self.skipped_updates += 1
        return np.abs(td), applied


class TaskQNet(_DuelingCore):
    """Q(s, candidate effect): which effect is worth performing next."""

    arch = ARCH_Q_TASK

    def __init__(self, grid_size: int, n_entities: int, rng: np.random.Generator,
                 state_units: int = 128, state_latent: int = 32,
                 effect_units: int = 256, effect_latent: int = 12,
                 trunk_units: int = 32, target_interval: int = 2_000,
                 emb_dim: int = 8):
        super().__init__()
        self.p = n_entities * N_ATTRIBUTES
        self.target_interval = target_interval
        self.senc = state_encoder_spec("senc", grid_size, n_entities,
                                       state_units, state_latent, emb_dim)
        self.eenc = effect_encoder_spec("eenc", self.p, effect_units, effect_latent)
        joined = state_latent + effect_latent
        self.trunk = MlpSpec("trunk", joined, tuple(
            DenseSpec(trunk_units, "relu") for _ in range(4)))
        self.head = MlpSpec("qhead", trunk_units, (DenseSpec(1, "linear"),))
        for spec in (self.senc, self.eenc, self.trunk, self.head):
            nncore.init_mlp(spec, self.online, rng)
        self._init_target()

    @property
    def widths(self):
        return (self.senc.widths + self.eenc.widths + self.trunk.widths
                + self.head.widths)

    def _forward(self, params: ParamSet, states, effects):
        slat, tape_s = nncore.forward(self.senc, params, states)
        elat, tape_e = nncore.forward(self.eenc, params, effects)
        joined = np.concatenate([slat, elat], axis=1)
        t, tape_t = nncore.forward(self.trunk, params, joined)
        q, tape_q = nncore.forward(self.head, params, t)
        return q[:, 0], (tape_s, tape_e, tape_t, tape_q, slat.shape[1])

    def _backward(self, params, tapes, dq):
        tape_s, tape_e, tape_t, tape_q, s_latent = tapes
        grads, dt = nncore.backward(self.head, params, tape_q, dq[:, None])
        _, djoined = nncore.backward(self.trunk, params, tape_t, dt, into=grads)
        nncore.backward(self.senc, params, tape_s, djoined[:, :s_latent], into=grads)
        nncore.backward(self.eenc, params, tape_e, djoined[:, s_latent:], into=grads)
        return grads

    def q_values(self, state: np.ndarray, candidates: np.ndarray,
                 params: ParamSet | None = None) -> np.ndarray:
        """Scores of every candidate effect in one state."""
        candidates = np.atleast_2d(candidates)
        states = np.tile(np.asarray(state, dtype=np.int64), (candidates.shape[0], 1))
        q, _ = self._forward(params or self.online, states,
                             candidates.astype(nncore.DTYPE))
        return q

    def select(self, state: np.ndarray, candidates: np.ndarray, eps: float,
               rng: np.random.Generator) -> int:
        """Index of the epsilon-greedy candidate."""
        if candidates.shape[0] == 0:
            raise UsageError("candidate list is empty")
        if eps > 0.0 and rng.random() < eps:
            return int(rng.integers(candidates.shape[0]))
        return int(np.argmax(self.q_values(state, candidates)))

    def loss_and_grads(self, params, states, effects, targets, weights):
        q, tapes = self._forward(params, states, effects)
        td = q - targets
        loss = float(np.mean(weights * td * td))
        dq = (2.0 / q.shape[0]) * weights * td
        grads = self._backward(params, tapes, dq)
        return loss, grads, td

    def train_step(self, batch, gamma: float, lr: float, weights):
        """Double-Q over each experience's own stored candidate list.

        batch: list of TaskExperience; returns (|td|, applied).
        """
        n = len(batch)
        states = np.stack([np.asarray(e.s_goal, dtype=np.int64) for e in batch])
        effects = np.stack([e.e_goal for e in batch]).astype(nncore.DTYPE)
        rewards = np.array([e.r_prime for e in batch], dtype=np.float64)
        dones = np.array([float(e.done) for e in batch])
        weights = np.asarray(weights, dtype=nncore.DTYPE)

        bootstrap = np.zeros(n)
        rows_s, rows_e, owners = [], [], []
        for i, exp in enumerate(batch):
            if exp.done:
                continue
            cands = np.atleast_2d(exp.next_candidates)
            if cands.shape[0] == 0:
                raise UsageError("non-terminal task experience without candidates")
            rows_s.append(np.tile(np.asarray(exp.s_next, dtype=np.int64),
                                  (cands.shape[0], 1)))
            rows_e.append(cands.astype(nncore.DTYPE))
            owners.extend([i] * cands.shape[0])
        if owners:
            all_s = np.concatenate(rows_s)
            all_e = np.concatenate(rows_e)
            owners = np.array(owners)
            q_online, _ = self._forward(self.online, all_s, all_e)
            q_target, _ = self._forward(self.target, all_s, all_e)
            for i in np.unique(owners):
                mask = owners == i
                pick = np.argmax(q_online[mask])
                bootstrap[i] = q_target[mask][pick]

        targets = (rewards + (1.0 - dones) * gamma * bootstrap).astype(nncore.DTYPE)
        loss, grads, td = self.loss_and_grads(self.online, states, effects,
                                              targets, weights)
        applied = False
        if np.isfinite(loss):
            applied = nncore.adam_step(self.online, grads, lr)
        if applied:
            self.train_steps += 1
            self._sync_if_due()
        else:
            self.skipped_updates += 1
        return np.abs(td), applied


class BaselineQNet(_DuelingCore):
    """Flat dueling double DQN over raw environment transitions."""

    arch = ARCH_Q_BASELINE

    def __init__(self, grid_size: int, n_entities: int, rng: np.random.Generator,
                 state_units: int = 256, state_latent: int = 12,
                 trunk_units: int = 256, target_interval: int = 15_000,
                 emb_dim: int = 8):
        super().__init__()
        self.p = n_entities * N_ATTRIBUTES
        self.target_interval = target_interval
        self.senc = state_encoder_spec("senc", grid_size, n_entities,
                                       state_units, state_latent, emb_dim)
        self.trunk = MlpSpec("trunk", state_latent, tuple(
            DenseSpec(trunk_units, "relu") for _ in range(4)))
        self.value_head = MlpSpec("value", trunk_units, (DenseSpec(1, "linear"),))
        self.adv_head = MlpSpec("adv", trunk_units, (DenseSpec(N_ACTIONS, "linear"),))
        for spec in (self.senc, self.trunk, self.value_head, self.adv_head):
            nncore.init_mlp(spec, self.online, rng)
        self._init_target()

    @property
    def widths(self):
        return (self.senc.widths + self.trunk.widths + self.value_head.widths
                + self.adv_head.widths)

    def _forward(self, params, states):
        slat, tape_s = nncore.forward(self.senc, params, states)
        t, tape_t = nncore.forward(self.trunk, params, slat)
        v, tape_v = nncore.forward(self.value_head, params, t)
        a, tape_a = nncore.forward(self.adv_head, params, t)
        q = v + a - a.mean(axis=1, keepdims=True)
        return q, v, (tape_s, tape_t, tape_v, tape_a)

    def _backward(self, params, tapes, dq):
        tape_s, tape_t, tape_v, tape_a = tapes
        dv = dq.sum(axis=1, keepdims=True)
        da = dq - dq.mean(axis=1, keepdims=True)
        grads, dt_v = nncore.backward(self.value_head, params, tape_v, dv)
        _, dt_a = nncore.backward(self.adv_head, params, tape_a, da, into=grads)
        _, dslat = nncore.backward(self.trunk, params, tape_t, dt_v + dt_a, into=grads)
        nncore.backward(self.senc, params, tape_s, dslat, into=grads)
        return grads

    def q_values(self, states, params=None):
        q, _, _ = self._forward(params or self.online,
                                np.atleast_2d(states).astype(np.int64))
        return q

    def state_value(self, states):
        _, v, _ = self._forward(self.online, np.atleast_2d(states).astype(np.int64))
        return v[:, 0]

    def select(self, state, eps, rng):
        if eps > 0.0 and rng.random() < eps:
            return int(rng.integers(N_ACTIONS))
        return int(np.argmax(self.q_values(state[None, :])[0]))

    def loss_and_grads(self, params, states, actions, targets, weights):
        q, _, tapes = self._forward(params, states)
        batch = q.shape[0]
        taken = q[np.arange(batch), actions]
        td = taken - targets
        loss = float(np.mean(weights * td * td))
        dq = np.zeros_like(q)
        dq[np.arange(batch), actions] = (2.0 / batch) * weights * td
        grads = self._backward(params, tapes, dq)
        return loss, grads, td

    def train_step(self, states, actions, rewards, next_states, dones,
                   weights, gamma: float, lr: float):
        states = np.asarray(states, dtype=np.int64)
        next_states = np.asarray(next_states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        rewards = np.asarray(rewards, dtype=np.float64)
        dones = np.asarray(dones, dtype=np.float64)
        weights = np.asarray(weights, dtype=nncore.DTYPE)

        q_next_online, _, _ = self._forward(self.online, next_states)
        best_next = np.argmax(q_next_online, axis=1)
        q_next_target, _, _ = self._forward(self.target, next_states)
        bootstrap = q_next_target[np.arange(len(best_next)), best_next]
        targets = (rewards + (1.0 - dones) * gamma * bootstrap).astype(nncore.DTYPE)

        loss, grads, td = self.loss_and_grads(self.online, states, actions,
                                              targets, weights)
        applied = False
        if np.isfinite(loss):
            applied = nncore.adam_step(self.online, grads, lr)
        if applied:
            self.train_steps += 1
            self._sync_if_due()
        else:
            self.skipped_updates += 1
        return np.abs(td), applied


def uniform_goal(candidates: np.ndarray, rng: np.random.Generator) -> int:
    """Unbiased goal pick over a sampled candidate list (duplicates count)."""
    if candidates.shape[0] == 0:
        raise UsageError("candidate list is empty")
    return int(rng.integers(candidates.shape[0]))
