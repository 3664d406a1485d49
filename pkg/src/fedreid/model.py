"""Flat-parameter MLP encoder/classifier with exact analytic gradients.

The trainable model is a tanh MLP over flattened pixel vectors. The last
linear layer produces the embedding, which is l2-normalized before a
bias-free linear classifier maps it to identity logits. All parameters live
in one flat float64 vector addressed through a shared ``ParamLayout`` so
that client vectors can be averaged coordinate-wise on the server.

Checkpoint files are binary: magic ``FRCP``, format version, segment
descriptors, then the raw parameter values as little-endian float64.
Round-trips are bit-exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DataLoadError, InputError, NumericError

NORM_FLOOR = 1e-12

_CKPT_MAGIC = b"FRCP"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    embed_dim: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim)
        if any(int(d) <= 0 for d in dims):
            raise ConfigurationError(f"all layer dimensions must be positive, got {dims}")
        if self.embed_dim < 2:
            raise ConfigurationError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass(frozen=True)
class Segment:
    """One named tensor inside the flat parameter vector."""

    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ParamLayout:
    segments: tuple[Segment, ...]

    @property
    def total_size(self) -> int:
        last = self.segments[-1]
        return last.offset + last.size

    def view(self, values: np.ndarray, name: str) -> np.ndarray:
        seg = self._by_name[name]
        return values[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    @property
    def _by_name(self) -> dict[str, Segment]:
        return {s.name: s for s in self.segments}


@dataclass(frozen=True)
class ParameterVector:
    values: np.ndarray
    layout: ParamLayout

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)


@dataclass(frozen=True)
class ModelState:
    params: ParameterVector
    momentum: np.ndarray
    step_count: int


@dataclass(frozen=True)
class ForwardCache:
    x: np.ndarray
    hidden_post: tuple[np.ndarray, ...]
    embed_pre: np.ndarray
    embed_norm: float


@dataclass(frozen=True)
class ForwardOutput:
    embedding: np.ndarray
    logits: np.ndarray
    cache: ForwardCache


def build_layout(cfg: EncoderConfig) -> ParamLayout:
    """Segment order: hidden affines, embedding affine, classifier weight."""
    segments = []
    offset = 0

    def add(name, shape):
        nonlocal offset
        seg = Segment(name, shape, offset)
        segments.append(seg)
        offset += seg.size

    fan_in = cfg.input_dim
    for i, width in enumerate(cfg.hidden_dims):
        add(f"hidden{i}.W", (fan_in, width))
        add(f"hidden{i}.b", (width,))
        fan_in = width
    add("embed.W", (fan_in, cfg.embed_dim))
    add("embed.b", (cfg.embed_dim,))
    add("classifier.W", (cfg.embed_dim, cfg.num_classes))
    return ParamLayout(tuple(segments))


def config_from_layout(layout: ParamLayout) -> EncoderConfig:
    shapes = {s.name: s.shape for s in layout.segments}
    hidden = []
    i = 0
    while f"hidden{i}.W" in shapes:
        hidden.append(shapes[f"hidden{i}.W"][1])
        i += 1
    input_dim = shapes["hidden0.W"][0] if hidden else shapes["embed.W"][0]
    return EncoderConfig(
        input_dim=input_dim,
        hidden_dims=tuple(hidden),
        embed_dim=shapes["embed.W"][1],
        num_classes=shapes["classifier.W"][1],
    )


def init_params(cfg: EncoderConfig, seed: int) -> ModelState:
    """Deterministic init: weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero."""
    layout = build_layout(cfg)
    rng = np.random.default_rng(seed)
    values = np.zeros(layout.total_size, dtype=np.float64)
    for seg in layout.segments:
        if seg.name.endswith(".W"):
            fan_in, fan_out = seg.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            values[seg.offset:seg.offset + seg.size] = rng.uniform(
                -bound, bound, size=seg.size
            )
    params = ParameterVector(values, layout)
    return ModelState(params=params, momentum=np.zeros_like(values), step_count=0)


def _weight_views(params: ParameterVector):
    layout = params.layout
    values = params.values
    hidden = []
    i = 0
    names = {s.name for s in layout.segments}
    while f"hidden{i}.W" in names:
        hidden.append((layout.view(values, f"hidden{i}.W"), layout.view(values, f"hidden{i}.b")))
        i += 1
    return (
        hidden,
        layout.view(values, "embed.W"),
        layout.view(values, "embed.b"),
        layout.view(values, "classifier.W"),
    )


def _forward_arrays(params: ParameterVector, X: np.ndarray):
    """Batched forward. Returns (H_list, E_pre, norms, Z, logits)."""
    hidden, We, be, Wc = _weight_views(params)
    h = X
    posts = []
    for W, b in hidden:
        h = np.tanh(h @ W + b)
        posts.append(h)
    e = h @ We + be
    norms = np.linalg.norm(e, axis=1)
    z = np.empty_like(e)
    ok = norms > NORM_FLOOR
    z[ok] = e[ok] / norms[ok, None]
    if not ok.all():
        # degenerate activations map to a fixed unit basis vector so the
        # embedding stays on the sphere
        z[~ok] = 0.0
        z[~ok, 0] = 1.0
    logits = z @ Wc
    return posts, e, norms, z, logits


def forward_batch(state: ModelState, X: np.ndarray) -> list[ForwardOutput]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError(f"expected a (batch, input_dim) array, got shape {X.shape}")
    expected = config_from_layout(state.params.layout).input_dim
    if X.shape[1] != expected:
        raise InputError(f"input length {X.shape[1]} does not match model input_dim {expected}")
    if not np.isfinite(X).all():
        raise InputError("non-finite values in input")
    posts, e, norms, z, logits = _forward_arrays(state.params, X)
    outs = []
    for i in range(X.shape[0]):
        cache = ForwardCache(
            x=X[i],
            hidden_post=tuple(p[i] for p in posts),
            embed_pre=e[i],
            embed_norm=float(norms[i]),
        )
        outs.append(ForwardOutput(embedding=z[i], logits=logits[i], cache=cache))
    return outs


def forward(state: ModelState, x: np.ndarray) -> ForwardOutput:
    return forward_batch(state, np.asarray(x, dtype=np.float64)[None, :])[0]


def embed_many(params: ParameterVector, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fast embedding/logit pass without gradient caches."""
    X = np.asarray(X, dtype=np.float64)
    if not np.isfinite(X).all():
        raise InputError("non-finite values in input")
    _, _, _, z, logits = _forward_arrays(params, X)
    return z, logits


def backward(
    state: ModelState,
    batch_outputs: list[ForwardOutput],
    d_embeddings: np.ndarray | None,
    d_logits: np.ndarray | None,
) -> np.ndarray:
    """Exact gradient of the scalar loss w.r.t. the flat parameter vector.

    ``d_embeddings``/``d_logits`` are the loss gradients w.r.t. the
    l2-normalized embeddings and the logits, one row per output. Either may
    be None (treated as zero).
    """
    if not batch_outputs:
        raise InputError("empty batch")
    B = len(batch_outputs)
    hidden, We, be, Wc = _weight_views(state.params)
    cfg = config_from_layout(state.params.layout)

    dZ = np.zeros((B, cfg.embed_dim)) if d_embeddings is None else np.array(d_embeddings, dtype=np.float64)
    dL = np.zeros((B, cfg.num_classes)) if d_logits is None else np.asarray(d_logits, dtype=np.float64)
    if dZ.shape != (B, cfg.embed_dim):
        raise InputError(f"d_embeddings shape {dZ.shape} does not match ({B}, {cfg.embed_dim})")
    if dL.shape != (B, cfg.num_classes):
        raise InputError(f"d_logits shape {dL.shape} does not match ({B}, {cfg.num_classes})")

    Z = np.stack([o.embedding for o in batch_outputs])
    E = np.stack([o.cache.embed_pre for o in batch_outputs])
    norms = np.array([o.cache.embed_norm for o in batch_outputs])
    X = np.stack([o.cache.x for o in batch_outputs])
    n_hidden = len(hidden)
    posts = [np.stack([o.cache.hidden_post[j] for o in batch_outputs]) for j in range(n_hidden)]

    grad = np.zeros_like(state.params.values)
    layout = state.params.layout

    def gview(name):
        return layout.view(grad, name)

    # classifier: logits = Z @ Wc
    gview("classifier.W")[:] = Z.T @ dL
    dZ = dZ + dL @ Wc.T

    # through normalization z = e / ||e||; degenerate rows are constant
    ok = norms > NORM_FLOOR
    dE = np.zeros_like(E)
    if ok.any():
        radial = np.einsum("ij,ij->i", Z[ok], dZ[ok])
        dE[ok] = (dZ[ok] - Z[ok] * radial[:, None]) / norms[ok, None]

    gview("embed.W")[:] = (posts[-1] if n_hidden else X).T @ dE
    gview("embed.b")[:] = dE.sum(axis=0)
    dH = dE @ We.T

    for j in range(n_hidden - 1, -1, -1):
        dA = dH * (1.0 - posts[j] ** 2)
        prev = posts[j - 1] if j > 0 else X
        gview(f"hidden{j}.W")[:] = prev.T @ dA
        gview(f"hidden{j}.b")[:] = dA.sum(axis=0)
        dH = dA @ hidden[j][0].T
    return grad


def sgd_step(
    state: ModelState,
    grad: np.ndarray,
    lr: float,
    momentum_coef: float,
    weight_decay: float,
) -> ModelState:
    """v <- momentum*v + (grad + wd*params); params <- params - lr*v."""
    if lr <= 0:
        raise ConfigurationError(f"lr must be positive, got {lr}")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.params.values.shape:
        raise InputError("gradient length does not match parameter vector")
    if not np.isfinite(grad).all():
        raise NumericError("non-finite gradient; state unchanged")
    v = momentum_coef * state.momentum + (grad + weight_decay * state.params.values)
    new_values = state.params.values - lr * v
    return ModelState(
        params=ParameterVector(new_values, state.params.layout),
        momentum=v,
        step_count=state.step_count + 1,
    )


def one_cycle_lr(step: int, total_steps: int, max_lr: float) -> float:
    """Linear ramp from max_lr/25 over the first 30% of steps, then cosine
    decay to max_lr/1e4 at the final step."""
    if total_steps <= 0:
        raise InputError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step < total_steps:
        raise InputError(f"step {step} out of range [0, {total_steps})")
    if max_lr <= 0:
        raise InputError(f"max_lr must be positive, got {max_lr}")
    peak = int(0.3 * total_steps)
    start = max_lr / 25.0
    end = max_lr / 1e4
    if step < peak:
        return start + (max_lr - start) * step / peak
    span = total_steps - 1 - peak
    if span <= 0:
        return max_lr
    t = (step - peak) / span
    return end + (max_lr - end) * 0.5 * (1.0 + math.cos(math.pi * t))


def save_checkpoint(path, params: ParameterVector) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(params.layout.segments)))
        for seg in params.layout.segments:
            name = seg.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", len(seg.shape)))
            for d in seg.shape:
                fh.write(struct.pack("<I", d))
            fh.write(struct.pack("<Q", seg.offset))
        fh.write(struct.pack("<Q", params.values.size))
        fh.write(params.values.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> ParameterVector:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        if blob[:4] != _CKPT_MAGIC:
            raise DataLoadError(f"{path}: not a checkpoint file")
        pos = 4
        version, n_seg = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != _CKPT_VERSION:
            raise DataLoadError(f"{path}: unsupported checkpoint version {version}")
        segments = []
        for _ in range(n_seg):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            segments.append(Segment(name, tuple(int(d) for d in shape), int(offset)))
        (total,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        layout = ParamLayout(tuple(segments))
        if layout.total_size != total:
            raise DataLoadError(f"{path}: segment sizes do not cover {total} values")
        values = np.frombuffer(blob, dtype="<f8", count=total, offset=pos).astype(np.float64)
    except struct.error as exc:
        raise DataLoadError(f"{path}: truncated checkpoint ({exc})") from exc
    expected = 4 + 8 + sum(2 + len(s.name.encode()) + 1 + 4 * len(s.shape) + 8 for s in segments) + 8 + 8 * total
    if len(blob) != expected:
        raise DataLoadError(f"{path}: trailing or missing bytes")
    return ParameterVector(values, layout)


def download_params(state: ModelState, global_params: ParameterVector) -> ModelState:
    """Overwrite local parameters with the global vector, keeping optimizer state."""
    if state.params.layout != global_params.layout:
        raise InputError("checkpoint layout does not match model layout")
    return replace(state, params=global_params.copy())
