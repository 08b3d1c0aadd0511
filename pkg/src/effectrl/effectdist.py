"""Generative distribution over controlled effects.

A VAE is trained on the effects the agent has caused so far and proposes
candidate effects to pursue as goals. It sees nothing but effects: no
state, no action, so a sampled effect is a goal the policy can chase from
anywhere.

Signed integer effects are represented as binary vectors: each component
with bound b owns a block of 2b + 1 one-hot slots, so the sigmoid decoder
really does emit a binary vector under cross-entropy, and every integer
step carries full contrast. Decoding takes the argmax per block, which
makes the codec round-trip exact. (An affine map of each component onto a
single unit-interval slot was tried first and collapses: neighboring
integers sit a few hundredths of a nat apart, so the KL term swallows the
reconstruction signal.)
"""
from __future__ import annotations

import numpy as np

from .errors import UsageError
from . import nncore
from .nncore import DenseSpec, MlpSpec, ParamSet

ARCH_EFFECT_VAE = "effect_vae_v1"


class EffectCodec:
    """Bijection between in-bound integer effects and binary block vectors."""

    def __init__(self, bounds: np.ndarray):
        self.bounds = np.asarray(bounds, dtype=np.int32)
        widths = 2 * self.bounds + 1
        self.offsets = np.concatenate([[0], np.cumsum(widths)]).astype(np.int64)

    @property
    def dim(self) -> int:
        """Width of integer effect vectors."""
        return self.bounds.size

    @property
    def code_dim(self) -> int:
        """Width of the binary representation."""
        return int(self.offsets[-1])

    def encode(self, effects: np.ndarray) -> np.ndarray:
        e = np.atleast_2d(np.asarray(effects, dtype=np.int64))
        if e.shape[1] != self.dim:
            raise UsageError(f"effect width {e.shape[1]} != codec width {self.dim}")
        if np.any(np.abs(e) > self.bounds):
            raise UsageError("effect exceeds the per-component bounds")
        out = np.zeros((e.shape[0], self.code_dim), dtype=np.float32)
        rows = np.arange(e.shape[0])
        for j in range(self.dim):
            out[rows, self.offsets[j] + e[:, j] + self.bounds[j]] = 1.0
        return out

    def decode(self, unit: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(np.asarray(unit))
        if u.shape[1] != self.code_dim:
            raise UsageError(f"vector width {u.shape[1]} != code width {self.code_dim}")
        out = np.zeros((u.shape[0], self.dim), dtype=np.int32)
        for j in range(self.dim):
            block = u[:, self.offsets[j]:self.offsets[j + 1]]
            out[:, j] = np.argmax(block, axis=1) - self.bounds[j]
        return out


def _bernoulli_entropy(t: np.ndarray) -> np.ndarray:
    tc = np.clip(t, nncore.BCE_CLAMP, 1.0 - nncore.BCE_CLAMP)
    return -(t * np.log(tc) + (1.0 - t) * np.log1p(-tc))


class EffectVae:
    """Encoder to an 8-dim Gaussian latent, sigmoid decoder back to effects."""

    def __init__(self, bounds: np.ndarray, rng: np.random.Generator,
                 latent: int = 8,
                 enc_units: tuple[int, ...] = (256, 128, 64),
                 dec_units: tuple[int, ...] = (64, 128, 256)):
        self.codec = EffectCodec(bounds)
        self.p = self.codec.dim
        self.latent = latent
        code = self.codec.code_dim
        self.enc_spec = MlpSpec(
            "venc", code, tuple(DenseSpec(u, "relu") for u in enc_units))
        enc_out = enc_units[-1]
        self.mu_spec = MlpSpec("vmu", enc_out, (DenseSpec(latent, "linear"),))
        self.logvar_spec = MlpSpec("vlv", enc_out, (DenseSpec(latent, "linear"),))
        self.dec_spec = MlpSpec(
            "vdec", latent,
            tuple(DenseSpec(u, "relu") for u in dec_units) + (DenseSpec(code, "sigmoid"),))
        self.params = ParamSet()
        for spec in (self.enc_spec, self.mu_spec, self.logvar_spec, self.dec_spec):
            nncore.init_mlp(spec, self.params, rng)
        self.train_steps = 0
        self.skipped_updates = 0

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.enc_spec.widths + self.mu_spec.widths
                + self.logvar_spec.widths + self.dec_spec.widths)

    def loss_and_grads(self, params: ParamSet, effects: np.ndarray,
                       noise: np.ndarray, weights=None):
        """Evidence bound pieces for a batch of integer effects.

        Deterministic given `noise` (the reparameterization draw), which the
        gradient checker relies on. Returns (loss, grads, recon_mean,
        kl_mean, per_sample). The reconstruction term is cross-entropy minus
        the targets' entropy, so its floor is zero.
        """
        dtype = params.params["vmu.l0.W"].dtype
        targets = self.codec.encode(effects).astype(dtype)
        batch = targets.shape[0]
        if weights is None:
            weights = np.ones(batch, dtype=dtype)

        h, tape_enc = nncore.forward(self.enc_spec, params, targets)
        mu, tape_mu = nncore.forward(self.mu_spec, params, h)
        logvar, tape_lv = nncore.forward(self.logvar_spec, params, h)
        std = np.exp(0.5 * logvar)
        z = mu + std * noise
        pred, tape_dec = nncore.forward(self.dec_spec, params, z)

        clamped = np.clip(pred, nncore.BCE_CLAMP, 1.0 - nncore.BCE_CLAMP)
        ce = -(targets * np.log(clamped) + (1.0 - targets) * np.log1p(-clamped))
        recon = np.sum(ce - _bernoulli_entropy(targets), axis=1)
        kl = 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=1)
        per_sample = recon + kl
        loss = float(np.mean(weights * per_sample))

        w = (weights / batch)[:, None]
        inside = (pred > nncore.BCE_CLAMP) & (pred < 1.0 - nncore.BCE_CLAMP)
        dpred = w * (-(targets / clamped) + (1.0 - targets) / (1.0 - clamped)) * inside
        grads, dz = nncore.backward(self.dec_spec, params, tape_dec, dpred)
        dmu = dz + w * mu
        dlogvar = dz * noise * 0.5 * std + w * 0.5 * (np.exp(logvar) - 1.0)
        _, dh_mu = nncore.backward(self.mu_spec, params, tape_mu, dmu, into=grads)
        _, dh_lv = nncore.backward(self.logvar_spec, params, tape_lv, dlogvar, into=grads)
        nncore.backward(self.enc_spec, params, tape_enc, dh_mu + dh_lv, into=grads)
        return loss, grads, float(np.mean(recon)), float(np.mean(kl)), per_sample

    def elbo_step(self, effects: np.ndarray, lr: float, rng: np.random.Generator,
                  weights=None):
        """One reparameterized Adam step; returns (recon, kl, per_sample, applied)."""
        effects = np.atleast_2d(effects)
        noise = rng.standard_normal((effects.shape[0], self.latent)).astype(nncore.DTYPE)
        loss, grads, recon, kl, per_sample = self.loss_and_grads(
            self.params, effects, noise, weights)
        applied = False
        if np.isfinite(loss):
            applied = nncore.adam_step(self.params, grads, lr)
        if applied:
            self.train_steps += 1
        else:
            self.skipped_updates += 1
        return recon, kl, per_sample, applied

    def decode_latents(self, z: np.ndarray) -> np.ndarray:
        unit, _ = nncore.forward(self.dec_spec, self.params, z.astype(nncore.DTYPE))
        return self.codec.decode(unit)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n integer effects from the learned distribution."""
        if n == 0:
            return np.zeros((0, self.p), dtype=np.int32)
        z = rng.standard_normal((n, self.latent))
        return self.decode_latents(z)

    def save(self, path) -> None:
        nncore.save_checkpoint(path, ARCH_EFFECT_VAE, self.widths, self.params)

    def load(self, path) -> None:
        _, _, params = nncore.load_checkpoint(path, expect_arch=ARCH_EFFECT_VAE,
                                              expect_widths=self.widths)
        self.params = params
