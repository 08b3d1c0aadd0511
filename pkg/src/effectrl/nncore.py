"""Minimal dense network engine: embeddings, MLP stacks, reverse-mode
gradients, Adam, losses, target sync and a checkpoint container.

There is no general autodiff graph. A forward pass over an MlpSpec returns
an activation tape; the matching backward pass replays it in reverse and
returns both parameter gradients and the gradient with respect to the
input, which is all the fixed architectures in this project need. Gradient
dicts can be accumulated across stacks that share parameters.

Everything runs in float32 by default; passing float64 parameter copies
(ParamSet.astype) switches a pass to float64, which the finite-difference
checker relies on.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError

DTYPE = np.float32

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

BCE_CLAMP = 1e-6


class ParamSet:
    """Named weight tensors with per-parameter Adam moments."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise UsageError(f"duplicate parameter {name!r}")
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, value in self.params.items():
            out.add(name, value.astype(dtype))
            out.m[name] = self.m[name].astype(dtype)
            out.v[name] = self.v[name].astype(dtype)
        out.step = self.step
        return out

    def copy(self) -> "ParamSet":
        return self.astype(self.params[next(iter(self.params))].dtype) if self.params else ParamSet()

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.params.items()}

    def checksum(self) -> float:
        return float(sum(np.abs(v).sum() for v in self.params.values()))

    def __contains__(self, name: str) -> bool:
        return name in self.params


def sync_target(online: ParamSet, target: ParamSet) -> None:
    """Hard-copy every online tensor into the target set."""
    if online.params.keys() != target.params.keys():
        raise UsageError("parameter sets have different tensors")
    for name, value in online.params.items():
        if target.params[name].shape != value.shape:
            raise UsageError(f"shape mismatch for {name!r}")
        target.params[name][...] = value


# -- specs -------------------------------------------------------------------

ACTIVATIONS = ("relu", "sigmoid", "linear")


@dataclass(frozen=True)
class DenseSpec:
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class EmbeddingSpec:
    """Integer columns looked up in per-kind tables of a common dimension.

    tables: (name, vocab_size) pairs; columns: table name per input column.
    """

    tables: tuple[tuple[str, int], ...]
    columns: tuple[str, ...]
    dim: int

    def __post_init__(self):
        known = {name for name, _ in self.tables}
        missing = [c for c in self.columns if c not in known]
        if missing:
            raise ConfigError(f"columns reference unknown tables: {missing}")


@dataclass(frozen=True)
class MlpSpec:
    name: str
    in_dim: int
    layers: tuple[DenseSpec, ...]
    embedding: EmbeddingSpec | None = None

    @property
    def dense_in_dim(self) -> int:
        if self.embedding is None:
            return self.in_dim
        return len(self.embedding.columns) * self.embedding.dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim if self.layers else self.dense_in_dim

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.dense_in_dim,) + tuple(layer.out_dim for layer in self.layers)


def init_mlp(spec: MlpSpec, params: ParamSet, rng: np.random.Generator) -> None:
    """He-uniform for ReLU layers, Xavier-uniform otherwise; zero biases."""
    if spec.embedding is not None:
        for table, vocab in spec.embedding.tables:
            params.add(
                f"{spec.name}.emb.{table}",
                rng.uniform(-0.5, 0.5, size=(vocab, spec.embedding.dim)).astype(DTYPE),
            )
    fan_in = spec.dense_in_dim
    for i, layer in enumerate(spec.layers):
        if layer.activation == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + layer.out_dim))
        params.add(
            f"{spec.name}.l{i}.W",
            rng.uniform(-limit, limit, size=(fan_in, layer.out_dim)).astype(DTYPE),
        )
        params.add(f"{spec.name}.l{i}.b", np.zeros(layer.out_dim, dtype=DTYPE))
        fan_in = layer.out_dim


def forward(spec: MlpSpec, params: ParamSet, x: np.ndarray):
    """Run the stack on a (batch, in_dim) array; returns (output, tape)."""
    tape = []
    if spec.embedding is not None:
        if not np.issubdtype(x.dtype, np.integer):
            raise UsageError(f"{spec.name}: embedding stack expects integer input")
        if x.ndim != 2 or x.shape[1] != len(spec.embedding.columns):
            raise UsageError(
                f"{spec.name}: expected {len(spec.embedding.columns)} integer columns,"
                f" got shape {x.shape}"
            )
        parts = []
        for c, table in enumerate(spec.embedding.columns):
            parts.append(params.params[f"{spec.name}.emb.{table}"][x[:, c]])
        h = np.concatenate(parts, axis=1)
        tape.append(("emb", x))
    else:
        if x.ndim != 2 or x.shape[1] != spec.in_dim:
            raise UsageError(f"{spec.name}: expected input width {spec.in_dim}, got {x.shape}")
        h = x
    for i, layer in enumerate(spec.layers):
        w = params.params[f"{spec.name}.l{i}.W"]
        b = params.params[f"{spec.name}.l{i}.b"]
        pre = h @ w + b
        if layer.activation == "relu":
            out = np.maximum(pre, 0.0)
        elif layer.activation == "sigmoid":
            ex = np.exp(-np.abs(pre))
            out = np.where(pre >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
        else:
            out = pre
        tape.append(("dense", i, layer.activation, h, out))
        h = out
    return h, tape


def backward(spec: MlpSpec, params: ParamSet, tape, dy: np.ndarray,
             into: dict[str, np.ndarray] | None = None):
    """Backpropagate dy through a recorded forward; returns (grads, dx).

    When `into` is given, gradients accumulate there, which supports stacks
    that share parameters across several forward passes.
    """
    grads: dict[str, np.ndarray] = {} if into is None else into

    def accumulate(name, g):
        if name in grads:
            grads[name] += g
        else:
            grads[name] = g

    d = dy
    for record in reversed(tape):
        if record[0] == "dense":
            _, i, activation, x_in, out = record
            if activation == "relu":
                d = d * (out > 0)
            elif activation == "sigmoid":
                d = d * out * (1.0 - out)
            w = params.params[f"{spec.name}.l{i}.W"]
            accumulate(f"{spec.name}.l{i}.W", x_in.T @ d)
            accumulate(f"{spec.name}.l{i}.b", d.sum(axis=0))
            d = d @ w.T
        else:  # embedding
            _, x = record
            dim = spec.embedding.dim
            for c, table in enumerate(spec.embedding.columns):
                name = f"{spec.name}.emb.{table}"
                if name not in grads:
                    grads[name] = np.zeros_like(params.params[name])
                np.add.at(grads[name], x[:, c], d[:, c * dim:(c + 1) * dim])
            d = None  # no gradient flows into integer inputs
    return grads, d


# -- optimizer ----------------------------------------------------------------


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float) -> bool:
    """One Adam update. Returns False (and changes nothing) on non-finite grads."""
    for name, g in grads.items():
        if params.params[name].shape != g.shape:
            raise UsageError(f"gradient shape mismatch for {name!r}")
        if not np.isfinite(g).all():
            return False
    params.step += 1
    t = params.step
    scale = lr / (1.0 - ADAM_BETA1 ** t)
    root_c2 = np.sqrt(1.0 - ADAM_BETA2 ** t)
    for name, g in grads.items():
        m = params.m[name]
        v = params.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        g = g * g
        g *= 1.0 - ADAM_BETA2
        v += g
        denom = np.sqrt(v)
        denom /= root_c2
        denom += ADAM_EPS
        np.divide(m, denom, out=denom)
        denom *= scale
        params.params[name] -= denom
    return True


# -- losses -------------------------------------------------------------------


def mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient with respect to pred."""
    if pred.shape != target.shape:
        raise UsageError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def bce(pred: np.ndarray, target: np.ndarray):
    """Mean binary cross-entropy (inputs clamped away from 0/1) and gradient."""
    if pred.shape != target.shape:
        raise UsageError(f"bce shape mismatch: {pred.shape} vs {target.shape}")
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = float(np.mean(-(target * np.log(p) + (1.0 - target) * np.log1p(-p))))
    grad = (-(target / p) + (1.0 - target) / (1.0 - p)) / p.size
    return value, grad


# -- verification ---------------------------------------------------------------


def gradient_check(loss_fn, params: ParamSet, rng: np.random.Generator,
                   n_coords: int = 64, h: float = 1e-3) -> float:
    """Compare analytic gradients with central differences in float64.

    loss_fn maps a ParamSet to (scalar loss, grads dict) and must be
    deterministic. Returns the worst relative error over `n_coords` sampled
    coordinates.

    Central differences are meaningless across a ReLU kink, so each
    coordinate is probed at step h and h/2: where the function is locally
    smooth the two estimates agree, while a crossed kink makes them diverge
    and the coordinate is redrawn. A wrong analytic gradient still fails,
    because then the two consistent numeric estimates disagree with it.
    """
    p64 = params.astype(np.float64)
    _, grads = loss_fn(p64)
    names = sorted(grads.keys())

    def numeric_at(arr, idx, saved, step):
        arr[idx] = saved + step
        up, _ = loss_fn(p64)
        arr[idx] = saved - step
        down, _ = loss_fn(p64)
        arr[idx] = saved
        return (up - down) / (2.0 * step)

    worst = 0.0
    checked = 0
    attempts = 0
    while checked < n_coords and attempts < 8 * n_coords:
        attempts += 1
        name = names[rng.integers(len(names))]
        arr = p64.params[name].ravel()
        idx = int(rng.integers(arr.size))
        saved = arr[idx]
        full = numeric_at(arr, idx, saved, h)
        half = numeric_at(arr, idx, saved, h / 2)
        analytic = grads[name].ravel()[idx]
        scale = max(abs(full), abs(half), abs(analytic))
        if scale < 1e-10:
            checked += 1
            continue
        if abs(full - half) / scale > 1e-5:
            continue  # kink inside the probe interval; redraw
        checked += 1
        worst = max(worst, abs(full - analytic) / scale)
    if checked < n_coords:
        raise UsageError("gradient check could not find enough smooth coordinates")
    return worst


# -- checkpoint container -------------------------------------------------------

CHECKPOINT_MAGIC = "NNC1"


def save_checkpoint(path, arch: str, widths, params: ParamSet) -> None:
    """Write a container: text header, then little-endian float32 blobs."""
    entries = list(params.params.items())
    entries += [(f"adam.m.{k}", v) for k, v in params.m.items()]
    entries += [(f"adam.v.{k}", v) for k, v in params.v.items()]
    header = io.StringIO()
    header.write(f"{CHECKPOINT_MAGIC} {arch}\n")
    header.write("widths " + ",".join(str(w) for w in widths) + "\n")
    header.write(f"step {params.step}\n")
    header.write(f"tensors {len(entries)}\n")
    for name, value in entries:
        dims = ",".join(str(d) for d in value.shape)
        header.write(f"tensor {name} {dims}\n")
    header.write("data\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for _, value in entries:
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_checkpoint(path, expect_arch: str | None = None,
                    expect_widths=None) -> tuple[str, tuple[int, ...], ParamSet]:
    try:
        return _load_checkpoint(path, expect_arch, expect_widths)
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: corrupt checkpoint ({exc})") from exc


def _load_checkpoint(path, expect_arch, expect_widths):
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"data\n")
    if sep < 0:
        raise ConfigError(f"{path}: not a checkpoint container")
    lines = blob[:sep].decode("utf-8").splitlines()
    magic, _, arch = lines[0].partition(" ")
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: unsupported checkpoint version {magic!r}")
    if expect_arch is not None and arch != expect_arch:
        raise ConfigError(f"{path}: architecture {arch!r} does not match {expect_arch!r}")
    widths_str = lines[1].split(" ", 1)[1] if " " in lines[1] else ""
    widths = tuple(int(w) for w in widths_str.split(",") if w)
    if expect_widths is not None and widths != tuple(expect_widths):
        raise ConfigError(f"{path}: layer widths {widths} do not match {tuple(expect_widths)}")
    step = int(lines[2].split(" ", 1)[1])
    n_tensors = int(lines[3].split(" ", 1)[1])
    shapes = []
    for line in lines[4:4 + n_tensors]:
        _, name, dims = line.split(" ")
        shapes.append((name, tuple(int(d) for d in dims.split(","))))

    params = ParamSet()
    params.step = step
    offset = sep + len(b"data\n")
    moments: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        value = raw.reshape(shape).astype(DTYPE)
        if name.startswith("adam.m.") or name.startswith("adam.v."):
            moments[name] = value
        else:
            params.add(name, value.copy())
    if offset != len(blob):
        raise ConfigError(f"{path}: trailing or missing tensor data")
    for name, value in moments.items():
        kind, target_name = name[5], name[7:]
        store = params.m if kind == "m" else params.v
        if target_name not in params.params:
            raise ConfigError(f"{path}: moment for unknown tensor {target_name!r}")
        if value.shape != params.params[target_name].shape:
            raise ConfigError(f"{path}: moment shape mismatch for {target_name!r}")
        store[target_name] = value.copy()
    return arch, widths, params
