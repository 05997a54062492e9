"""Desk-scale two-tower encoders and the oblique projection heads.

Parameters live in flat ``name -> ndarray`` dicts so they can be checkpointed,
optimized and differentiated without a module system. Forward functions take
the dict with values as :class:`~obclip.autodiff.Tensor` (tracked leaves while
training, constants otherwise).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .distance import DistanceKind
from .geometry import ObliquePoint, ShapeMismatch
from .rng import named_rng

CHECKPOINT_FORMAT = "obclip-checkpoint/1"
CLS_INIT_STD = 0.02

Params = Mapping[str, Tensor]


# --- init helpers ---------------------------------------------------------------

def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within ``bound`` standard deviations."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return x * std


def _fan_in_weight(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return truncated_normal(rng, (fan_in, fan_out), 1.0 / math.sqrt(fan_in))


def _linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Apply ``x @ w (+ b)`` over the last axis of a tensor of any rank."""
    lead = x.shape[:-1]
    y = ops.matmul(ops.reshape(x, (int(np.prod(lead)), x.shape[-1])), w)
    if b is not None:
        y = ops.add(y, ops.expand(b, y.shape))
    return ops.reshape(y, lead + (w.shape[1],))


def _activation(name: str):
    acts = {"gelu": ops.gelu, "relu": ops.relu}
    if name not in acts:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(acts)}")
    return acts[name]


# --- MLP tower ------------------------------------------------------------------

@dataclass
class MLPEncoderConfig:
    input_dim: int
    hidden_dims: list = field(default_factory=lambda: [64])
    output_dim: int = 32
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = list(self.hidden_dims)
        if min([self.input_dim, self.output_dim] + self.hidden_dims) < 1:
            raise ValueError("all MLP dimensions must be >= 1")
        _activation(self.activation)

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + self.hidden_dims + [self.output_dim]


def init_mlp(config: MLPEncoderConfig, rng: Optional[np.random.Generator] = None) -> dict[str, np.ndarray]:
    rng = rng or named_rng(config.seed, "init", "mlp")
    params = {}
    dims = config.dims
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"W{i}"] = _fan_in_weight(rng, a, b)
        params[f"b{i}"] = np.zeros(b)
    return params


def encode_mlp(config: MLPEncoderConfig, params: Params, x) -> Tensor:
    """Map ``(batch, input_dim)`` (or a single vector) to ``output_dim`` features."""
    x = as_tensor(x)
    if x.shape[-1] != config.input_dim:
        raise ShapeMismatch(f"MLP expects input dim {config.input_dim}, got {x.shape[-1]}")
    act = _activation(config.activation)
    layers = len(config.dims) - 1
    h = x
    for i in range(layers):
        h = _linear(h, params[f"W{i}"], params[f"b{i}"])
        if i < layers - 1:
            h = act(h)
    return h


# --- transformer tower ----------------------------------------------------------

@dataclass
class MiniTransformerConfig:
    token_dim: int
    layers: int = 2
    heads: int = 2
    model_dim: int = 32
    feedforward_dim: int = 64
    sequence_length: int = 16
    cls_count: int = 1
    modality: str = "visual"
    seed: int = 0

    def __post_init__(self):
        if min(self.token_dim, self.layers, self.heads, self.model_dim, self.feedforward_dim,
               self.sequence_length, self.cls_count) < 1:
            raise ValueError("transformer dimensions and counts must be >= 1")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.modality not in ("visual", "textual"):
            raise ValueError(f"modality must be 'visual' or 'textual', got {self.modality!r}")


def init_transformer(config: MiniTransformerConfig, rng: Optional[np.random.Generator] = None) -> dict[str, np.ndarray]:
    rng = rng or named_rng(config.seed, "init", "transformer", config.modality)
    d, f = config.model_dim, config.feedforward_dim
    p = {
        "W_embed": _fan_in_weight(rng, config.token_dim, d),
        "b_embed": np.zeros(d),
        "pos": truncated_normal(rng, (config.sequence_length, d), CLS_INIT_STD),
    }
    if config.modality == "visual":
        # one independent random embedding per token breaks the symmetry between them
        p["cls"] = truncated_normal(rng, (config.cls_count, d), CLS_INIT_STD)
    else:
        p["cls"] = truncated_normal(rng, (1, d), CLS_INIT_STD)
        p["cls_pos"] = truncated_normal(rng, (config.cls_count, d), CLS_INIT_STD)
    for i in range(config.layers):
        for name in ("Wq", "Wk", "Wv", "Wo"):
            p[f"block{i}.{name}"] = _fan_in_weight(rng, d, d)
        p[f"block{i}.W1"] = _fan_in_weight(rng, d, f)
        p[f"block{i}.b1"] = np.zeros(f)
        p[f"block{i}.W2"] = _fan_in_weight(rng, f, d)
        p[f"block{i}.b2"] = np.zeros(d)
        for ln in ("ln1", "ln2"):
            p[f"block{i}.{ln}.gain"] = np.ones(d)
            p[f"block{i}.{ln}.bias"] = np.zeros(d)
    p["ln_final.gain"] = np.ones(d)
    p["ln_final.bias"] = np.zeros(d)
    return p


def _layer_norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    y = ops.layer_norm(x, axis=-1)
    y = ops.mul(y, ops.expand(params[f"{prefix}.gain"], y.shape))
    return ops.add(y, ops.expand(params[f"{prefix}.bias"], y.shape))


def _attention(x: Tensor, params: Params, prefix: str, heads: int) -> Tensor:
    bsz, seq, d = x.shape
    dh = d // heads

    def split(t):
        t = ops.reshape(t, (bsz, seq, heads, dh))
        return ops.reshape(ops.transpose(t, (0, 2, 1, 3)), (bsz * heads, seq, dh))

    q = split(_linear(x, params[f"{prefix}.Wq"]))
    k = split(_linear(x, params[f"{prefix}.Wk"]))
    v = split(_linear(x, params[f"{prefix}.Wv"]))
    scores = ops.scalar_mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    out = ops.matmul(ops.softmax(scores, axis=-1), v)
    out = ops.reshape(ops.transpose(ops.reshape(out, (bsz, heads, seq, dh)), (0, 2, 1, 3)), (bsz, seq, d))
    return _linear(out, params[f"{prefix}.Wo"])


def encode_transformer(config: MiniTransformerConfig, params: Params, tokens) -> Tensor:
    """Return the ``cls_count`` output states, shape ``(batch, m, d)`` (or ``(m, d)`` unbatched)."""
    tokens = as_tensor(tokens)
    single = tokens.ndim == 2
    if single:
        tokens = ops.reshape(tokens, (1,) + tokens.shape)
    if tokens.ndim != 3 or tokens.shape[1:] != (config.sequence_length, config.token_dim):
        raise ShapeMismatch(f"expected tokens of shape (*, {config.sequence_length}, {config.token_dim}), "
                            f"got {tokens.shape}")
    bsz, m, d = tokens.shape[0], config.cls_count, config.model_dim

    x = _linear(tokens, params["W_embed"], params["b_embed"])
    x = ops.add(x, ops.expand(params["pos"], x.shape))
    if config.modality == "visual":
        cls = params["cls"]
    else:
        cls = ops.add(ops.expand(ops.reshape(params["cls"], (d,)), (m, d)), params["cls_pos"])
    x = ops.concat([ops.expand(cls, (bsz, m, d)), x], axis=1)

    for i in range(config.layers):
        pre = f"block{i}"
        x = ops.add(x, _attention(_layer_norm(x, params, f"{pre}.ln1"), params, pre, config.heads))
        h = _layer_norm(x, params, f"{pre}.ln2")
        h = _linear(ops.gelu(_linear(h, params[f"{pre}.W1"], params[f"{pre}.b1"])),
                    params[f"{pre}.W2"], params[f"{pre}.b2"])
        x = ops.add(x, h)
    x = _layer_norm(x, params, "ln_final")
    out = ops.slice(x, (slice(None), slice(0, m)))
    return ops.reshape(out, (m, d)) if single else out


# --- projection heads -----------------------------------------------------------

def head_single(state, weight, n: int, m: int) -> Tensor:
    """Project ``(batch, d)`` states to ``l = n*m`` and fold into ``(batch, m, n)`` unit rows.

    Row ``j`` of the result is column ``j`` of the oblique point, built from the
    contiguous block ``[j*n, (j+1)*n)`` of the projected vector.
    """
    state, weight = as_tensor(state), as_tensor(weight)
    if weight.shape[-1] != n * m:
        raise ShapeMismatch(f"projection width {weight.shape[-1]} != n*m = {n * m}")
    squeeze = state.ndim == 1
    if squeeze:
        state = ops.reshape(state, (1, state.shape[0]))
    y = ops.reshape(_linear(state, weight), (state.shape[0], m, n))
    y = ops.l2_normalize(y, axis=-1)
    return ops.reshape(y, (m, n)) if squeeze else y


def head_multi(states, weights, n: int) -> Tensor:
    """Project each of the ``m`` token states to ``n`` dims and normalize.

    ``weights`` is ``(m, d, n)`` for per-token heads or ``(d, n)`` when shared.
    ``states`` is ``(batch, m, d)`` or ``(m, d)``.
    """
    states, weights = as_tensor(states), as_tensor(weights)
    squeeze = states.ndim == 2
    if squeeze:
        states = ops.reshape(states, (1,) + states.shape)
    bsz, m, d = states.shape
    if weights.shape[-1] != n:
        raise ShapeMismatch(f"head output width {weights.shape[-1]} != n = {n}")
    if weights.ndim == 2:
        y = _linear(states, weights)
    else:
        if weights.shape[0] != m:
            raise ShapeMismatch(f"{weights.shape[0]} per-token heads for {m} tokens")
        y = ops.matmul(ops.transpose(states, (1, 0, 2)), weights)  # (m, b, n)
        y = ops.transpose(y, (1, 0, 2))
    y = ops.l2_normalize(y, axis=-1)
    return ops.reshape(y, (m, n)) if squeeze else y


def to_oblique_point(rows) -> ObliquePoint:
    """Convert one ``(m, n)`` head output into an :class:`ObliquePoint` (``n x m``)."""
    arr = rows.data if isinstance(rows, Tensor) else np.asarray(rows)
    return ObliquePoint(arr.T)


# --- two towers -----------------------------------------------------------------

@dataclass
class TowerSpec:
    """Everything needed to build both towers and their heads."""

    kind: str = "oblique_neg_trace"
    head: str = "single"
    n: int = 8
    m: int = 4
    encoder: str = "mlp"
    image_dim: int = 64
    text_dim: int = 64
    hidden_dims: list = field(default_factory=lambda: [64])
    model_dim: int = 32
    activation: str = "gelu"
    layers: int = 2
    heads: int = 2
    feedforward_dim: int = 64
    sequence_length: int = 16
    shared_head: bool = False

    def __post_init__(self):
        kind = DistanceKind.parse(self.kind)
        if self.head not in ("single", "multi"):
            raise ValueError(f"head must be 'single' or 'multi', got {self.head!r}")
        if self.encoder not in ("mlp", "transformer"):
            raise ValueError(f"encoder must be 'mlp' or 'transformer', got {self.encoder!r}")
        if self.head == "multi" and (self.encoder != "transformer" or not kind.oblique):
            raise ValueError("multi-token heads need the transformer encoder and an oblique distance")
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be >= 1")
        if self.encoder == "transformer":
            for dim in (self.image_dim, self.text_dim):
                if dim % self.sequence_length:
                    raise ValueError(f"feature dim {dim} does not split into {self.sequence_length} tokens")

    @property
    def distance(self) -> DistanceKind:
        return DistanceKind.parse(self.kind)

    @property
    def embed_dim(self) -> int:
        return self.n * self.m

    @property
    def cls_count(self) -> int:
        return self.m if self.head == "multi" else 1

    def mlp_config(self, tower: str, seed: int = 0) -> MLPEncoderConfig:
        dim = self.image_dim if tower == "img" else self.text_dim
        return MLPEncoderConfig(dim, list(self.hidden_dims), self.model_dim, self.activation, seed)

    def transformer_config(self, tower: str, seed: int = 0) -> MiniTransformerConfig:
        dim = self.image_dim if tower == "img" else self.text_dim
        return MiniTransformerConfig(
            token_dim=dim // self.sequence_length, layers=self.layers, heads=self.heads,
            model_dim=self.model_dim, feedforward_dim=self.feedforward_dim,
            sequence_length=self.sequence_length, cls_count=self.cls_count,
            modality="visual" if tower == "img" else "textual", seed=seed)


TOWERS = ("img", "txt")


class TwoTower:
    """Image and text towers plus heads that land on the topology of ``spec.kind``."""

    def __init__(self, spec: TowerSpec):
        self.spec = spec

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        s = self.spec
        params = {}
        for tower in TOWERS:
            rng = named_rng(seed, "init", tower)
            if s.encoder == "mlp":
                enc = init_mlp(s.mlp_config(tower), rng)
            else:
                enc = init_transformer(s.transformer_config(tower), rng)
            params.update({f"{tower}.enc.{k}": v for k, v in enc.items()})
            d = s.model_dim
            if s.head == "single":
                params[f"{tower}.head.W"] = _fan_in_weight(rng, d, s.embed_dim)
            elif s.shared_head:
                params[f"{tower}.head.W"] = _fan_in_weight(rng, d, s.n)
            else:
                params[f"{tower}.head.W"] = np.stack([_fan_in_weight(rng, d, s.n) for _ in range(s.m)])
        return params

    def _encode(self, params: Params, tower: str, x) -> Tensor:
        s = self.spec
        enc = {k[len(tower) + 5:]: v for k, v in params.items() if k.startswith(f"{tower}.enc.")}
        x = as_tensor(x)
        if s.encoder == "mlp":
            return encode_mlp(s.mlp_config(tower), enc, x)
        cfg = s.transformer_config(tower)
        tokens = ops.reshape(x, (x.shape[0], cfg.sequence_length, cfg.token_dim))
        states = encode_transformer(cfg, enc, tokens)
        if s.head == "single":
            return ops.reshape(ops.slice(states, (slice(None), 0)), (x.shape[0], s.model_dim))
        return states

    def embed_tower(self, params: Params, tower: str, x) -> Tensor:
        s = self.spec
        h = self._encode(params, tower, x)
        w = params[f"{tower}.head.W"]
        kind = s.distance
        if s.head == "multi":
            return head_multi(h, w, s.n)
        if kind.oblique:
            return head_single(h, w, s.n, s.m)
        y = _linear(h, w)
        return ops.l2_normalize(y, axis=-1) if kind is DistanceKind.SPHERE_NEG_INNER else y

    def embed(self, params: Params, x_img, x_txt) -> tuple[Tensor, Tensor]:
        return self.embed_tower(params, "img", x_img), self.embed_tower(params, "txt", x_txt)


def parameter_count(params: Mapping[str, np.ndarray], prefix: str = "") -> int:
    return int(sum(np.asarray(getattr(v, "data", v)).size for k, v in params.items() if k.startswith(prefix)))


def constant_params(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write a key -> array map to ``.npz`` with a versioned JSON header.

    Arrays are stored raw (little-endian float64), so loading is bit-exact.
    """
    header = {"format": CHECKPOINT_FORMAT,
              "shapes": {k: list(np.shape(v)) for k, v in params.items()},
              "meta": meta or {}}
    arrays = {f"p/{k}": np.asarray(getattr(v, "data", v), dtype="<f8") for k, v in params.items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__header__" not in z.files:
            raise ValueError(f"{path}: missing checkpoint header")
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        params = {k[2:]: z[k].astype(np.float64) for k in z.files if k.startswith("p/")}
    for k, shape in header["shapes"].items():
        if k not in params or list(params[k].shape) != shape:
            raise ValueError(f"{path}: array {k!r} missing or has the wrong shape")
    return params, header.get("meta", {})


def spec_dict(spec: TowerSpec) -> dict:
    return asdict(spec)
