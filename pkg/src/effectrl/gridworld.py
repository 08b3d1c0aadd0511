"""Deterministic grid world with an agent, ball, chest, target and 0-3 demons.

The world is a square of `grid_size` interior cells surrounded by a wall;
interior coordinates run from 1 to grid_size inclusive. Every entity is a
row of the state matrix with five integer attributes:

    (type_id, x, y, color_or_direction, carrying_flag)

Rows are ordered (agent, ball, chest, target, demon_1, ...). For the agent
the fourth attribute is its facing direction (0 east, 1 south, 2 west,
3 north); for demons it stores the phase of their autonomous dynamics so
that a state snapshot fully determines the future; for everything else it
is a constant color.

The ball tracks its carrier: while carried its coordinates equal the
agent's, once deposited they equal the chest's. The ball's own
carrying_flag is 1 exactly when it is held by the agent or the chest, so
agent_flag + chest_flag + (ball free on grid) always accounts for the one
ball in play.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError

# attribute columns
COL_TYPE = 0
COL_X = 1
COL_Y = 2
COL_DIR = 3  # direction for the agent, dynamics phase for demons, color otherwise
COL_CARRY = 4

# entity rows
ROW_AGENT = 0
ROW_BALL = 1
ROW_CHEST = 2
ROW_TARGET = 3
FIRST_DEMON_ROW = 4

# type ids
TYPE_AGENT = 1
TYPE_BALL = 2
TYPE_CHEST = 3
TYPE_TARGET = 4
TYPE_DEMON = 5

N_ATTRIBUTES = 5
N_ACTIONS = 6

TURN_LEFT, TURN_RIGHT, FORWARD, PICKUP, DROP, TOGGLE = range(N_ACTIONS)
ACTION_NAMES = ("turn_left", "turn_right", "forward", "pickup", "drop", "toggle")

# facing offsets indexed by direction: east, south, west, north (y grows downward)
DIR_OFFSETS = ((1, 0), (0, 1), (-1, 0), (0, -1))

# clockwise 2x2 loop walked by circular demons, relative to their anchor cell
CIRCLE_OFFSETS = ((0, 0), (1, 0), (1, 1), (0, 1))

TASKS = ("T", "BT", "CBT")
DEMON_DYNAMICS = ("static", "horizontal", "circular")

HORIZ_RIGHT = 0  # demon phase values for horizontal dynamics
HORIZ_LEFT = 1


@dataclass(frozen=True)
class EnvConfig:
    grid_size: int = 8
    task: str = "T"
    demon_count: int = 0
    demon_dynamics: str = "static"
    max_episode_steps: int = 100

    def __post_init__(self):
        if self.grid_size < 5:
            raise ConfigError(f"grid_size must be >= 5, got {self.grid_size}")
        if not 0 <= self.demon_count <= 3:
            raise ConfigError(f"demon_count must be in 0..3, got {self.demon_count}")
        if self.max_episode_steps < 1:
            raise ConfigError("max_episode_steps must be >= 1")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.demon_dynamics not in DEMON_DYNAMICS:
            raise ConfigError(f"demon_dynamics must be one of {DEMON_DYNAMICS}")

    @property
    def n_entities(self) -> int:
        return 4 + self.demon_count

    @property
    def state_dim(self) -> int:
        return self.n_entities * N_ATTRIBUTES


@dataclass(frozen=True)
class State:
    """Entity matrix of shape (n_entities, 5); immutable by convention."""

    entities: np.ndarray

    def flatten(self) -> np.ndarray:
        return self.entities.astype(np.int32).ravel().copy()

    @property
    def n_entities(self) -> int:
        return self.entities.shape[0]


@dataclass(frozen=True)
class Snapshot:
    """Full restore point: state plus the episode step counter and flags."""

    entities: np.ndarray
    env_step: int
    done: bool

    @property
    def state(self) -> State:
        return State(self.entities.copy())


@dataclass
class StepResult:
    next_state: State
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class GridWorld:
    """Single-agent deterministic simulator; one instance per training loop."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self._entities = np.zeros((config.n_entities, N_ATTRIBUTES), dtype=np.int32)
        self._t = 0
        self._done = True  # must reset() before stepping

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int) -> State:
        """Place all entities on distinct interior cells, deterministically per seed."""
        cfg = self.config
        g = cfg.grid_size
        n = cfg.n_entities
        if n > g * g:
            raise ConfigError(f"{n} entities cannot fit a {g}x{g} grid")
        rng = np.random.default_rng(seed)
        cells = [(x, y) for y in range(1, g + 1) for x in range(1, g + 1)]
        for _ in range(1000):
            picked = rng.choice(len(cells), size=n, replace=False)
            positions = [cells[i] for i in picked]
            if cfg.demon_dynamics == "circular" and not all(
                x <= g - 1 and y <= g - 1 for x, y in positions[FIRST_DEMON_ROW:]
            ):
                continue  # circular loop must fit inside the walls
            break
        else:
            raise ConfigError("could not place entities; grid too constrained")

        ent = self._entities
        ent[:] = 0
        types = [TYPE_AGENT, TYPE_BALL, TYPE_CHEST, TYPE_TARGET] + [TYPE_DEMON] * cfg.demon_count
        colors = [0, 1, 2, 3] + [0] * cfg.demon_count
        for row, ((x, y), type_id, color) in enumerate(zip(positions, types, colors)):
            ent[row] = (type_id, x, y, color, 0)
        ent[ROW_AGENT, COL_DIR] = rng.integers(4)
        self._t = 0
        self._done = False
        return self.state

    @property
    def state(self) -> State:
        return State(self._entities.copy())

    @property
    def env_step(self) -> int:
        return self._t

    @property
    def done(self) -> bool:
        return self._done

    def snapshot(self) -> Snapshot:
        return Snapshot(self._entities.copy(), self._t, self._done)

    def restore(self, snap: Snapshot) -> None:
        if snap.entities.shape != self._entities.shape:
            raise UsageError(
                f"snapshot shape {snap.entities.shape} does not match "
                f"environment shape {self._entities.shape}"
            )
        self._entities[:] = snap.entities
        self._t = snap.env_step
        self._done = snap.done

    # -- dynamics ----------------------------------------------------------

    def step(self, action: int) -> StepResult:
        if self._done:
            raise UsageError("step() called on a finished episode; reset() first")
        if not 0 <= action < N_ACTIONS:
            raise UsageError(f"action must be in 0..{N_ACTIONS - 1}, got {action}")

        self._apply_agent(action)
        self._advance_demons()
        self._t += 1

        solved = task_predicate(self.state, self.config.task)
        reward = 0.0
        if solved:
            reward = 1.0 - 0.9 * self._t / self.config.max_episode_steps
        self._done = solved or self._t >= self.config.max_episode_steps
        return StepResult(self.state, reward, self._done, {"env_step": self._t})

    def _apply_agent(self, action: int) -> None:
        ent = self._entities
        ax, ay = ent[ROW_AGENT, COL_X], ent[ROW_AGENT, COL_Y]
        adir = ent[ROW_AGENT, COL_DIR]
        carrying = ent[ROW_AGENT, COL_CARRY] == 1
        dx, dy = DIR_OFFSETS[adir]
        fx, fy = ax + dx, ay + dy  # facing cell

        if action == TURN_LEFT:
            ent[ROW_AGENT, COL_DIR] = (adir - 1) % 4
        elif action == TURN_RIGHT:
            ent[ROW_AGENT, COL_DIR] = (adir + 1) % 4
        elif action == FORWARD:
            if self._in_bounds(fx, fy) and not self._blocks_agent(fx, fy):
                ent[ROW_AGENT, COL_X], ent[ROW_AGENT, COL_Y] = fx, fy
                if carrying:
                    ent[ROW_BALL, COL_X], ent[ROW_BALL, COL_Y] = fx, fy
        elif action == PICKUP:
            ball_free = ent[ROW_BALL, COL_CARRY] == 0
            at_ball = (ent[ROW_BALL, COL_X], ent[ROW_BALL, COL_Y]) == (fx, fy)
            if not carrying and ball_free and at_ball:
                ent[ROW_BALL, COL_X], ent[ROW_BALL, COL_Y] = ax, ay
                ent[ROW_BALL, COL_CARRY] = 1
                ent[ROW_AGENT, COL_CARRY] = 1
        elif action == DROP:
            if carrying and self._in_bounds(fx, fy) and self._drop_cell_free(fx, fy):
                ent[ROW_BALL, COL_X], ent[ROW_BALL, COL_Y] = fx, fy
                ent[ROW_BALL, COL_CARRY] = 0
                ent[ROW_AGENT, COL_CARRY] = 0
        elif action == TOGGLE:
            at_chest = (ent[ROW_CHEST, COL_X], ent[ROW_CHEST, COL_Y]) == (fx, fy)
            chest_empty = ent[ROW_CHEST, COL_CARRY] == 0
            if carrying and at_chest and chest_empty:
                ent[ROW_BALL, COL_X] = ent[ROW_CHEST, COL_X]
                ent[ROW_BALL, COL_Y] = ent[ROW_CHEST, COL_Y]
                ent[ROW_AGENT, COL_CARRY] = 0
                ent[ROW_CHEST, COL_CARRY] = 1

    def _in_bounds(self, x: int, y: int) -> bool:
        g = self.config.grid_size
        return 1 <= x <= g and 1 <= y <= g

    def _blocks_agent(self, x: int, y: int) -> bool:
        ent = self._entities
        if (ent[ROW_CHEST, COL_X], ent[ROW_CHEST, COL_Y]) == (x, y):
            return True
        for row in range(FIRST_DEMON_ROW, ent.shape[0]):
            if (ent[row, COL_X], ent[row, COL_Y]) == (x, y):
                return True
        return False

    def _drop_cell_free(self, x: int, y: int) -> bool:
        # the target cell stays droppable; chest and demons do not
        return not self._blocks_agent(x, y)

    def _occupied(self, x: int, y: int, skip_row: int) -> bool:
        ent = self._entities
        for row in range(ent.shape[0]):
            if row == skip_row:
                continue
            if (ent[row, COL_X], ent[row, COL_Y]) == (x, y):
                return True
        return False

    def _advance_demons(self) -> None:
        ent = self._entities
        dyn = self.config.demon_dynamics
        if dyn == "static":
            return
        for row in range(FIRST_DEMON_ROW, ent.shape[0]):
            x, y, phase = ent[row, COL_X], ent[row, COL_Y], ent[row, COL_DIR]
            if dyn == "horizontal":
                step = 1 if phase == HORIZ_RIGHT else -1
                nx = x + step
                if not self._in_bounds(nx, y):
                    step = -step
                    phase = HORIZ_RIGHT if step > 0 else HORIZ_LEFT
                    nx = x + step
                ent[row, COL_DIR] = phase
                if not self._occupied(nx, y, skip_row=row):
                    ent[row, COL_X] = nx
            else:  # circular
                ox, oy = CIRCLE_OFFSETS[phase]
                anchor = (x - ox, y - oy)
                nphase = (phase + 1) % 4
                nx = anchor[0] + CIRCLE_OFFSETS[nphase][0]
                ny = anchor[1] + CIRCLE_OFFSETS[nphase][1]
                if not self._occupied(nx, ny, skip_row=row):
                    ent[row, COL_X], ent[row, COL_Y] = nx, ny
                    ent[row, COL_DIR] = nphase

    # -- counterfactual oracle ---------------------------------------------

    def oracle_total_effects(self, snap: Snapshot | None = None) -> np.ndarray:
        """State change each action would cause right now, as a (6, p) int matrix.

        Purely observational: the environment is restored afterwards and no
        episode bookkeeping leaks out.
        """
        origin = self.snapshot()
        base = snap if snap is not None else origin
        if base.done:
            raise UsageError("cannot expand effects of a finished episode")
        flat = base.entities.astype(np.int32).ravel()
        effects = np.zeros((N_ACTIONS, flat.size), dtype=np.int32)
        for action in range(N_ACTIONS):
            self.restore(base)
            result = self.step(action)
            effects[action] = result.next_state.flatten() - flat
        self.restore(origin)
        return effects


def task_predicate(state: State, task: str) -> bool:
    """True when the task's goal condition holds in `state`."""
    ent = state.entities
    at_target = (
        ent[ROW_AGENT, COL_X] == ent[ROW_TARGET, COL_X]
        and ent[ROW_AGENT, COL_Y] == ent[ROW_TARGET, COL_Y]
    )
    if task == "T":
        return bool(at_target)
    if task == "BT":
        return bool(at_target and ent[ROW_AGENT, COL_CARRY] == 1)
    if task == "CBT":
        return bool(at_target and ent[ROW_CHEST, COL_CARRY] == 1)
    raise ConfigError(f"unknown task {task!r}")


def classify_effect(effect: np.ndarray) -> str:
    """Bucket an effect vector into nothing/basic/simple/complex.

    Demon rows are ignored: demon deltas are uncontrolled dynamics and say
    nothing about what the agent did. Precedence is complex > simple >
    basic so composite changes land in their hardest bucket.
    """
    effect = np.asarray(effect).ravel()
    if effect.size % N_ATTRIBUTES != 0 or effect.size < 4 * N_ATTRIBUTES:
        raise UsageError(f"effect length {effect.size} is not an entity-matrix delta")
    rows = effect.reshape(-1, N_ATTRIBUTES)[:FIRST_DEMON_ROW]
    if not rows.any():
        return "nothing"
    if rows[ROW_CHEST, COL_CARRY] != 0:
        return "complex"
    ball_moved = rows[ROW_BALL, COL_X] != 0 or rows[ROW_BALL, COL_Y] != 0
    any_flag = (rows[:, COL_CARRY] != 0).any()
    if ball_moved or any_flag:
        return "simple"
    agent_only = rows.copy()
    agent_only[ROW_AGENT, COL_X] = 0
    agent_only[ROW_AGENT, COL_Y] = 0
    agent_only[ROW_AGENT, COL_DIR] = 0
    if not agent_only.any():
        return "basic"
    return "complex"


def effect_key(effect: np.ndarray) -> str:
    """Canonical, deterministic string key for an integer effect vector."""
    effect = np.asarray(effect).ravel()
    nz = np.flatnonzero(effect)
    if nz.size == 0:
        return "zero"
    return ",".join(f"{i}:{int(effect[i]):+d}" for i in nz)
