"""Effects: raw state changes, the learned per-action dynamics model and the
counterfactual rule that strips uncontrolled dynamics out of them.

An effect is an integer vector the same length as a flattened state. The
controlled part of an effect is what remains after subtracting the
component-wise mode over all actions' effects: whatever happens regardless
of the chosen action (demons moving, nothing at all) is "what normally
would happen" and cancels out.
"""
from __future__ import annotations

import numpy as np

from .errors import UsageError
from .gridworld import (
    COL_CARRY,
    COL_DIR,
    COL_TYPE,
    COL_X,
    COL_Y,
    N_ACTIONS,
    N_ATTRIBUTES,
    State,
)
from . import nncore
from .nncore import DenseSpec, EmbeddingSpec, MlpSpec, ParamSet

ARCH_TOTAL_EFFECTS = "total_effects_v1"


def flatten_state(s) -> np.ndarray:
    if isinstance(s, State):
        return s.flatten()
    return np.asarray(s, dtype=np.int32).ravel()


def effect_bounds(grid_size: int, n_entities: int) -> np.ndarray:
    """Per-component clamp bound for effect deltas (0 for immutable type ids)."""
    per_attr = np.zeros(N_ATTRIBUTES, dtype=np.int32)
    per_attr[COL_TYPE] = 0
    per_attr[COL_X] = grid_size - 1
    per_attr[COL_Y] = grid_size - 1
    per_attr[COL_DIR] = 3
    per_attr[COL_CARRY] = 1
    return np.tile(per_attr, n_entities)


def total_effect(s, s_next) -> np.ndarray:
    """Raw change of the environment state: next minus current."""
    a = flatten_state(s)
    b = flatten_state(s_next)
    if a.shape != b.shape:
        raise UsageError(f"state shapes differ: {a.shape} vs {b.shape}")
    return b - a


def discretize(raw: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Round half away from zero, then clamp to the per-component bounds."""
    raw = np.asarray(raw, dtype=np.float64)
    rounded = np.where(raw >= 0, np.floor(raw + 0.5), np.ceil(raw - 0.5))
    return np.clip(rounded, -bounds, bounds).astype(np.int32)


def mode_over_actions(per_action: np.ndarray) -> np.ndarray:
    """Component-wise mode of the (n_actions, p) effect matrix.

    Ties prefer the value closest to zero, then the smaller signed value,
    so "no change" wins whenever it is as common as anything else.
    """
    eff = np.asarray(per_action, dtype=np.int64)
    counts = (eff[:, None, :] == eff[None, :, :]).sum(axis=1)
    score = counts * (1 << 20) - np.abs(eff) * (1 << 10) - eff
    best = np.argmax(score, axis=0)
    return eff[best, np.arange(eff.shape[1])].astype(np.int32)


def controlled_effect(per_action: np.ndarray, taken: int) -> np.ndarray:
    """What the taken action changed relative to the normality world."""
    eff = np.asarray(per_action)
    if eff.ndim != 2 or eff.shape[0] != N_ACTIONS:
        raise UsageError(f"expected ({N_ACTIONS}, p) effect matrix, got {eff.shape}")
    if not 0 <= taken < N_ACTIONS:
        raise UsageError(f"invalid action {taken}")
    return (eff[taken] - mode_over_actions(eff)).astype(np.int32)


def has_achieved(e_step: np.ndarray, e_goal: np.ndarray) -> bool:
    """Integer effects match when every component is closer than one unit,
    which is exact equality."""
    a = np.asarray(e_step)
    b = np.asarray(e_goal)
    if a.shape != b.shape:
        raise UsageError(f"effect shapes differ: {a.shape} vs {b.shape}")
    return bool(np.array_equal(a, b))


def state_embedding_spec(grid_size: int, n_entities: int, dim: int) -> EmbeddingSpec:
    tables = (
        ("type", 6),
        ("x", grid_size + 1),
        ("y", grid_size + 1),
        ("dir", 4),
        ("carry", 2),
    )
    return EmbeddingSpec(tables=tables, columns=("type", "x", "y", "dir", "carry") * n_entities, dim=dim)


def state_encoder_spec(name: str, grid_size: int, n_entities: int,
                       units: int, latent: int, emb_dim: int) -> MlpSpec:
    # the latent layer is linear: a ReLU bottleneck this narrow can die
    # outright under value-regression gradients
    return MlpSpec(
        name,
        n_entities * N_ATTRIBUTES,
        (DenseSpec(units, "relu"), DenseSpec(latent, "linear")),
        embedding=state_embedding_spec(grid_size, n_entities, emb_dim),
    )


class TotalEffectsModel:
    """Predicts each action's raw effect from the last two states.

    One shared state encoder embeds the previous and the current state (the
    pair makes demon velocity observable); four dense layers map the two
    latents to one effect head per action.
    """

    def __init__(self, grid_size: int, n_entities: int, rng: np.random.Generator,
                 state_units: int = 128, state_latent: int = 32,
                 units: int = 32, emb_dim: int = 8):
        self.grid_size = grid_size
        self.n_entities = n_entities
        self.p = n_entities * N_ATTRIBUTES
        self.bounds = effect_bounds(grid_size, n_entities)
        self.enc_spec = state_encoder_spec("enc", grid_size, n_entities,
                                           state_units, state_latent, emb_dim)
        self.trunk_spec = MlpSpec(
            "trunk",
            2 * state_latent,
            (
                DenseSpec(units, "relu"),
                DenseSpec(units, "relu"),
                DenseSpec(units, "relu"),
                DenseSpec(N_ACTIONS * self.p, "linear"),
            ),
        )
        self.params = ParamSet()
        nncore.init_mlp(self.enc_spec, self.params, rng)
        nncore.init_mlp(self.trunk_spec, self.params, rng)
        self.train_steps = 0
        self.skipped_updates = 0

    @property
    def widths(self) -> tuple[int, ...]:
        return self.enc_spec.widths + self.trunk_spec.widths

    def _forward(self, prev: np.ndarray, cur: np.ndarray, params: ParamSet):
        lat_prev, tape_prev = nncore.forward(self.enc_spec, params, prev)
        lat_cur, tape_cur = nncore.forward(self.enc_spec, params, cur)
        joined = np.concatenate([lat_prev, lat_cur], axis=1)
        out, tape_trunk = nncore.forward(self.trunk_spec, params, joined)
        return out, (tape_prev, tape_cur, tape_trunk, lat_prev.shape[1])

    def _backward(self, tapes, dout: np.ndarray, params: ParamSet):
        tape_prev, tape_cur, tape_trunk, latent = tapes
        grads, djoined = nncore.backward(self.trunk_spec, params, tape_trunk, dout)
        nncore.backward(self.enc_spec, params, tape_prev, djoined[:, :latent], into=grads)
        nncore.backward(self.enc_spec, params, tape_cur, djoined[:, latent:], into=grads)
        return grads

    def predict_batch(self, prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
        """Raw (batch, n_actions, p) effect predictions."""
        out, _ = self._forward(np.asarray(prev), np.asarray(cur), self.params)
        return out.reshape(-1, N_ACTIONS, self.p)

    def predict_all(self, s_prev, s) -> np.ndarray:
        """Raw (n_actions, p) effect predictions for a single state pair."""
        prev = flatten_state(s_prev)[None, :]
        cur = flatten_state(s)[None, :]
        return self.predict_batch(prev, cur)[0]

    def predict_discrete(self, s_prev, s) -> np.ndarray:
        return discretize(self.predict_all(s_prev, s), self.bounds)

    def loss_and_grads(self, params: ParamSet, prev, cur, actions, targets, weights=None):
        """Per-sample MSE on the taken action's head only."""
        out, tapes = self._forward(prev, cur, params)
        batch = out.shape[0]
        heads = out.reshape(batch, N_ACTIONS, self.p)
        taken = heads[np.arange(batch), actions]
        diff = taken - targets
        per_sample = np.mean(diff * diff, axis=1)
        if weights is None:
            weights = np.ones(batch, dtype=out.dtype)
        loss = float(np.mean(weights * per_sample))
        dtaken = (2.0 / (batch * self.p)) * weights[:, None] * diff
        dout = np.zeros_like(heads)
        dout[np.arange(batch), actions] = dtaken
        grads = self._backward(tapes, dout.reshape(batch, -1), params)
        return loss, grads, per_sample

    def train_step(self, prev, cur, actions, targets, lr: float, weights=None):
        """One Adam step; returns (loss, per-sample squared errors, applied)."""
        prev = np.asarray(prev, dtype=np.int64)
        cur = np.asarray(cur, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        targets = np.asarray(targets, dtype=nncore.DTYPE)
        loss, grads, per_sample = self.loss_and_grads(
            self.params, prev, cur, actions, targets, weights
        )
        applied = False
        if np.isfinite(loss):
            applied = nncore.adam_step(self.params, grads, lr)
        if applied:
            self.train_steps += 1
        else:
            self.skipped_updates += 1
        return loss, per_sample, applied

    def save(self, path) -> None:
        nncore.save_checkpoint(path, ARCH_TOTAL_EFFECTS, self.widths, self.params)

    def load(self, path) -> None:
        _, _, params = nncore.load_checkpoint(path, expect_arch=ARCH_TOTAL_EFFECTS,
                                              expect_widths=self.widths)
        self.params = params
