"""Shared experience store with per-consumer proportional prioritization.

All consumers read the same ring-buffer arena, but each one owns a private
sum tree of priorities: updating the dynamics model's priorities never
changes what the policy samples. New experiences enter every view with one
initial priority (how rare the observed effect is), and each consumer then
reshapes its own view from its own errors.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import UsageError

PRIORITY_FLOOR = 1e-6
RARITY_CAP = 1e5
RARITY_EPS = 1e-5
RARITY_DECAY = 0.999


@dataclass(frozen=True, slots=True)
class ExplorationExperience:
    s_prev: np.ndarray
    s: np.ndarray
    a: int
    s_next: np.ndarray
    e_goal: np.ndarray
    e_step: np.ndarray
    r_prime: float
    d_prime: bool


@dataclass(frozen=True, slots=True)
class TaskExperience:
    s_goal: np.ndarray
    e_goal: np.ndarray
    s_next: np.ndarray
    next_candidates: np.ndarray  # (n, p); may be empty on terminal experiences
    r_prime: float
    done: bool


@dataclass(frozen=True, slots=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


def her_augment(exp: ExplorationExperience) -> ExplorationExperience:
    """Hindsight twin: the achieved effect becomes the goal, successfully."""
    return replace(exp, e_goal=exp.e_step, r_prime=1.0, d_prime=True)


class SumTree:
    """Flat perfect binary tree over `capacity` slots; float64 sums."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        size = 1
        while size < capacity:
            size *= 2
        self.size = size
        self.nodes = np.zeros(2 * size, dtype=np.float64)
        self.depth = int(np.log2(size))

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def get(self, slots: np.ndarray) -> np.ndarray:
        return self.nodes[self.size + np.asarray(slots)]

    def set(self, slots: np.ndarray, values: np.ndarray) -> None:
        slots = np.asarray(slots, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if slots.size == 0:
            return
        # keep the last write per slot, then propagate level deltas
        rev_slots = slots[::-1]
        uniq, first = np.unique(rev_slots, return_index=True)
        vals = values[::-1][first]
        idx = uniq + self.size
        delta = vals - self.nodes[idx]
        self.nodes[idx] = vals
        while idx[0] > 1:
            idx = idx >> 1
            np.add.at(self.nodes, idx, delta)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.total <= 0:
            raise UsageError("cannot sample from an empty tree")
        u = rng.random(n) * self.nodes[1]
        node = np.ones(n, dtype=np.int64)
        for _ in range(self.depth):
            left = node * 2
            left_sum = self.nodes[left]
            go_right = u > left_sum
            u = u - left_sum * go_right
            node = left + go_right
        return node - self.size


class RarityEstimator:
    """Exponential moving average of how often each discrete effect shows up."""

    def __init__(self, decay: float = RARITY_DECAY, eps: float = RARITY_EPS,
                 cap: float = RARITY_CAP):
        if not 0.0 < decay < 1.0:
            raise UsageError("decay must be in (0, 1)")
        self.decay = decay
        self.eps = eps
        self.cap = cap
        self._table: dict[bytes, tuple[float, int]] = {}
        self._count = 0

    def probability(self, effect: np.ndarray) -> float:
        key = np.asarray(effect, dtype=np.int32).tobytes()
        entry = self._table.get(key)
        if entry is None:
            return 0.0
        value, at = entry
        return value * self.decay ** (self._count - at)

    def rarity(self, effect: np.ndarray) -> float:
        """Rarity of this observation; also folds it into the running average."""
        p_hat = self.probability(effect)
        score = min(self.cap, 1.0 / (p_hat + self.eps))
        key = np.asarray(effect, dtype=np.int32).tobytes()
        self._count += 1
        self._table[key] = (self.decay * p_hat + (1.0 - self.decay), self._count)
        return score


class SharedReplay:
    """One experience arena, one priority view per consumer."""

    def __init__(self, capacity: int, consumers: tuple[str, ...],
                 alpha: float = 1.0, beta: float = 0.01):
        if capacity < 1:
            raise UsageError("capacity must be positive")
        if not consumers:
            raise UsageError("at least one consumer view is required")
        self.capacity = capacity
        self.alpha = alpha
        self.beta = beta
        self._arena: list = [None] * capacity
        self._ids = np.full(capacity, -1, dtype=np.int64)
        self._count = 0
        self._next_id = 0
        self._views = {name: SumTree(capacity) for name in consumers}

    def __len__(self) -> int:
        return self._count

    @property
    def consumers(self) -> tuple[str, ...]:
        return tuple(self._views)

    def _view(self, consumer: str) -> SumTree:
        try:
            return self._views[consumer]
        except KeyError:
            raise UsageError(f"unknown consumer view {consumer!r}") from None

    def push(self, exp, initial_priority: float) -> int:
        exp_id = self._next_id
        self._next_id += 1
        slot = exp_id % self.capacity
        self._arena[slot] = exp
        self._ids[slot] = exp_id
        self._count = min(self._count + 1, self.capacity)
        value = max(float(initial_priority), PRIORITY_FLOOR) ** self.alpha
        for tree in self._views.values():
            tree.set(np.array([slot]), np.array([value]))
        return exp_id

    def sample(self, consumer: str, batch: int, rng: np.random.Generator):
        """Draw with replacement proportionally to priority^alpha.

        Returns (experiences, importance weights normalized by the batch
        max, experience ids).
        """
        if self._count == 0:
            raise UsageError("replay buffer is empty")
        tree = self._view(consumer)
        slots = tree.sample(rng, batch)
        slots = np.clip(slots, 0, self.capacity - 1)
        probs = tree.get(slots) / tree.total
        weights = np.power(self._count * np.maximum(probs, 1e-12), -self.beta)
        weights /= weights.max()
        exps = [self._arena[s] for s in slots]
        return exps, weights.astype(np.float64), self._ids[slots].copy()

    def update_priorities(self, consumer: str, ids: np.ndarray, errors: np.ndarray) -> None:
        tree = self._view(consumer)
        ids = np.asarray(ids, dtype=np.int64)
        errors = np.asarray(errors, dtype=np.float64)
        slots = ids % self.capacity
        live = self._ids[slots] == ids
        if not live.any():
            return
        values = (np.abs(errors[live]) + PRIORITY_FLOOR) ** self.alpha
        tree.set(slots[live], values)
