"""Decoder-only transformer with pruning-state bookkeeping.

A model is (config, named weight tensors, descriptor). The descriptor says
which residual sub-blocks are present and how many MLP channels / attention
heads each one keeps; forward() consults it on every call. Masking hands out
lightweight views that share the weight arrays but carry a reduced
descriptor, so candidate evaluations never mutate the model and may run
concurrently. materialize() physically slices the tensors down to what the
descriptor implies.

Weight layout follows the linear convention (out_features, in_features):
  wq/wk/wv: (heads*head_dim, hidden)   head slices are row blocks
  wo:       (hidden, heads*head_dim)   head slices are column blocks
  w_gate/w_up: (intermediate, hidden)  channel slices are rows
  w_down:   (hidden, intermediate)     channel slices are columns

Width pruning always drops the trailing units, so "first k kept" is the
single slicing rule everywhere.
"""

from __future__ import annotations

import hashlib
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import FormatError, InputError, StateError

ATTN = "attn"
MLP = "mlp"

NORM_KEYS = ("attn_norm", "mlp_norm")


@dataclass(frozen=True)
class BlockId:
    """One minimal residual block: the attention or MLP half of a layer."""

    layer: int
    kind: str  # ATTN or MLP

    def __post_init__(self):
        if self.kind not in (ATTN, MLP):
            raise InputError(f"unknown block kind {self.kind!r}")


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int
    hidden: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    intermediate: int
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    tied_embeddings: bool = False

    def __post_init__(self):
        if self.hidden != self.n_heads * self.head_dim:
            raise InputError(
                f"hidden={self.hidden} must equal n_heads*head_dim={self.n_heads * self.head_dim}"
            )
        if self.n_heads % self.n_kv_heads != 0:
            raise InputError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.head_dim % 2 != 0:
            raise InputError("head_dim must be even for rotary embeddings")
        for name in ("vocab_size", "n_layers", "hidden", "intermediate"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")

    @property
    def group_size(self) -> int:
        """Query heads per KV head; the atomic unit of head pruning."""
        return self.n_heads // self.n_kv_heads

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        try:
            return cls(**data)
        except TypeError as e:
            raise FormatError(f"bad config.json: {e}") from e


@dataclass
class LayerState:
    attn_present: bool
    mlp_present: bool
    heads_kept: int
    kv_heads_kept: int
    mlp_channels_kept: int


@dataclass
class ArchDescriptor:
    """Per-layer pruning state: block presence flags and kept widths."""

    layers: list

    @classmethod
    def dense(cls, config: ModelConfig) -> "ArchDescriptor":
        return cls(
            [
                LayerState(True, True, config.n_heads, config.n_kv_heads, config.intermediate)
                for _ in range(config.n_layers)
            ]
        )

    def copy(self) -> "ArchDescriptor":
        return ArchDescriptor([replace(ls) for ls in self.layers])

    def validate(self, config: ModelConfig) -> None:
        if len(self.layers) != config.n_layers:
            raise InputError(f"descriptor has {len(self.layers)} layers, config has {config.n_layers}")
        g = config.group_size
        for i, ls in enumerate(self.layers):
            if not (0 <= ls.heads_kept <= config.n_heads):
                raise InputError(f"layer {i}: heads_kept={ls.heads_kept} out of range")
            if not (0 <= ls.mlp_channels_kept <= config.intermediate):
                raise InputError(f"layer {i}: mlp_channels_kept={ls.mlp_channels_kept} out of range")
            if ls.heads_kept % g != 0:
                raise InputError(f"layer {i}: heads_kept={ls.heads_kept} breaks KV groups of {g}")
            if ls.kv_heads_kept * g != ls.heads_kept:
                raise InputError(f"layer {i}: kv_heads_kept inconsistent with heads_kept")
            if ls.attn_present != (ls.heads_kept > 0):
                raise InputError(f"layer {i}: attn_present must match heads_kept > 0")
            if ls.mlp_present != (ls.mlp_channels_kept > 0):
                raise InputError(f"layer {i}: mlp_present must match mlp_channels_kept > 0")

    def le(self, other: "ArchDescriptor") -> bool:
        """True when self keeps no structure that other has dropped."""
        return all(
            a.heads_kept <= b.heads_kept and a.mlp_channels_kept <= b.mlp_channels_kept
            for a, b in zip(self.layers, other.layers)
        )

    def block_present(self, block: BlockId) -> bool:
        ls = self._layer(block.layer)
        return ls.attn_present if block.kind == ATTN else ls.mlp_present

    def kept_width(self, block: BlockId) -> int:
        """Kept query heads for ATTN blocks, kept channels for MLP blocks."""
        ls = self._layer(block.layer)
        return ls.heads_kept if block.kind == ATTN else ls.mlp_channels_kept

    def present_blocks(self, kind: str | None = None) -> list:
        out = []
        for i, ls in enumerate(self.layers):
            if ls.attn_present and kind in (None, ATTN):
                out.append(BlockId(i, ATTN))
            if ls.mlp_present and kind in (None, MLP):
                out.append(BlockId(i, MLP))
        return out

    def _layer(self, idx: int) -> LayerState:
        if not (0 <= idx < len(self.layers)):
            raise InputError(f"layer index {idx} out of range")
        return self.layers[idx]

    def to_json(self) -> dict:
        return {
            "attn_present": [ls.attn_present for ls in self.layers],
            "mlp_present": [ls.mlp_present for ls in self.layers],
            "heads_kept": [ls.heads_kept for ls in self.layers],
            "kv_heads_kept": [ls.kv_heads_kept for ls in self.layers],
            "mlp_channels_kept": [ls.mlp_channels_kept for ls in self.layers],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ArchDescriptor":
        try:
            n = len(data["attn_present"])
            return cls(
                [
                    LayerState(
                        bool(data["attn_present"][i]),
                        bool(data["mlp_present"][i]),
                        int(data["heads_kept"][i]),
                        int(data["kv_heads_kept"][i]),
                        int(data["mlp_channels_kept"][i]),
                    )
                    for i in range(n)
                ]
            )
        except (KeyError, IndexError, TypeError) as e:
            raise FormatError(f"bad descriptor.json: {e}") from e


@dataclass
class TransformerModel:
    config: ModelConfig
    weights: dict
    descriptor: ArchDescriptor

    def clone(self) -> "TransformerModel":
        """Deep copy; weights become independent arrays."""
        return TransformerModel(
            self.config,
            {k: v.copy() for k, v in self.weights.items()},
            self.descriptor.copy(),
        )

    def with_descriptor(self, descriptor: ArchDescriptor) -> "TransformerModel":
        """Shared-weights view under a different descriptor (masking)."""
        return TransformerModel(self.config, self.weights, descriptor)

    def param_count(self) -> int:
        return count_params(self.config, self.descriptor)

    def fingerprint(self) -> str:
        """SHA-256 over all weight bytes; used to assert scoring never mutates."""
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()


def tensor_layout(config: ModelConfig, descriptor: ArchDescriptor):
    """Ordered (name, shape) list for every tensor the descriptor implies.

    Norm gammas are retained even when their block is absent; removing a
    block deletes only its projection matrices.
    """
    d = config.hidden
    hd = config.head_dim
    out = [("embed", (config.vocab_size, d))]
    for i, ls in enumerate(descriptor.layers):
        p = f"layers.{i}."
        if ls.attn_present:
            out.append((p + "wq", (ls.heads_kept * hd, d)))
            out.append((p + "wk", (ls.kv_heads_kept * hd, d)))
            out.append((p + "wv", (ls.kv_heads_kept * hd, d)))
            out.append((p + "wo", (d, ls.heads_kept * hd)))
        out.append((p + "attn_norm", (d,)))
        if ls.mlp_present:
            out.append((p + "w_gate", (ls.mlp_channels_kept, d)))
            out.append((p + "w_up", (ls.mlp_channels_kept, d)))
            out.append((p + "w_down", (d, ls.mlp_channels_kept)))
        out.append((p + "mlp_norm", (d,)))
    out.append(("final_norm", (d,)))
    if not config.tied_embeddings:
        out.append(("lm_head", (config.vocab_size, d)))
    return out


def count_params(config: ModelConfig, descriptor: ArchDescriptor) -> int:
    """Total parameter count implied by the descriptor (embeddings, norms and
    head included; the head counted once when tied)."""
    return sum(int(np.prod(shape)) for _, shape in tensor_layout(config, descriptor))


def pruning_ratio(current: ArchDescriptor, dense: ArchDescriptor, config: ModelConfig) -> float:
    """Fraction of the dense model's parameters that current has removed."""
    if not current.le(dense):
        raise InputError("current descriptor keeps structure absent from the dense reference")
    base = count_params(config, dense)
    return (base - count_params(config, current)) / base


def random_model(config: ModelConfig, seed: int, init_scale: float = 0.02,
                 residual_scale: float | None = None) -> TransformerModel:
    """Gaussian-initialized dense model. residual_scale, when given, shrinks
    the output projections (wo, w_down) as 1/sqrt(2*n_layers) style inits do."""
    rng = np.random.default_rng(seed)
    desc = ArchDescriptor.dense(config)
    weights = {}
    for name, shape in tensor_layout(config, desc):
        base = name.split(".")[-1]
        if base in NORM_KEYS or name == "final_norm":
            weights[name] = np.ones(shape, dtype=np.float32)
            continue
        scale = init_scale
        if residual_scale is not None and base in ("wo", "w_down"):
            scale = init_scale * residual_scale
        weights[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return TransformerModel(config, weights, desc)


# ---------------------------------------------------------------------------
# forward pass


def rope_tables(config: ModelConfig, length: int, start: int = 0):
    """cos/sin tables (length, head_dim//2) in float64."""
    d2 = config.head_dim // 2
    inv_freq = config.rope_base ** (-np.arange(d2, dtype=np.float64) * 2.0 / config.head_dim)
    angles = np.outer(np.arange(start, start + length, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate-half position encoding on (T, heads, head_dim)."""
    d2 = x.shape[-1] // 2
    x64 = x.astype(np.float64, copy=False)
    x1, x2 = x64[..., :d2], x64[..., d2:]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.concatenate([x1 * c - x2 * s, x2 * c + x1 * s], axis=-1)
    return out.astype(np.float32)


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise InputError("tokens must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError(f"token id out of range for vocab {config.vocab_size}")
    return ids


def _attn_block(config, weights, i, ls, x, cos, sin, mask, tap=None):
    hd = config.head_dim
    hq, kv = ls.heads_kept, ls.kv_heads_kept
    T = x.shape[0]
    p = f"layers.{i}."
    h = kernels.rms_norm(x, weights[p + "attn_norm"], config.norm_eps)
    q = kernels.matmul(h, weights[p + "wq"][: hq * hd].T).reshape(T, hq, hd)
    k = kernels.matmul(h, weights[p + "wk"][: kv * hd].T).reshape(T, kv, hd)
    v = kernels.matmul(h, weights[p + "wv"][: kv * hd].T).reshape(T, kv, hd)
    q = apply_rope(q, cos, sin)
    k = apply_rope(k, cos, sin)
    q = q.transpose(1, 0, 2)
    k = np.repeat(k.transpose(1, 0, 2), config.group_size, axis=0)
    v = np.repeat(v.transpose(1, 0, 2), config.group_size, axis=0)
    scores = (kernels.bmm64(q, k.transpose(0, 2, 1)) / math.sqrt(hd)).astype(np.float32)
    scores += mask
    probs = kernels.softmax_rows(scores.reshape(hq * T, T)).reshape(hq, T, T)
    ctx = kernels.bmm64(probs, v).transpose(1, 0, 2).reshape(T, hq * hd).astype(np.float32)
    if tap is not None:
        tap(i, "attn_out", ctx)
    return kernels.matmul(ctx, weights[p + "wo"][:, : hq * hd].T)


def _mlp_block(config, weights, i, ls, x, tap=None):
    c = ls.mlp_channels_kept
    p = f"layers.{i}."
    h = kernels.rms_norm(x, weights[p + "mlp_norm"], config.norm_eps)
    gate = kernels.matmul(h, weights[p + "w_gate"][:c].T)
    up = kernels.matmul(h, weights[p + "w_up"][:c].T)
    act = kernels.silu(gate) * up
    if tap is not None:
        tap(i, "mlp_in", act)
    return kernels.matmul(act, weights[p + "w_down"][:, :c].T)


def forward(model: TransformerModel, tokens, tap=None) -> np.ndarray:
    """Causal forward pass; returns logits of shape (len(tokens), vocab).

    Absent blocks contribute nothing to the residual stream; partially kept
    blocks run on their leading heads/channels only. `tap(layer, name, x)`
    is an optional hook for activation statistics.
    """
    ids = _check_tokens(model.config, tokens)
    cfg, w = model.config, model.weights
    T = ids.size
    x = w["embed"][ids]
    cos, sin = rope_tables(cfg, T)
    mask = np.triu(np.full((T, T), -np.inf, dtype=np.float32), k=1)
    for i, ls in enumerate(model.descriptor.layers):
        if ls.attn_present and ls.heads_kept > 0:
            x = x + _attn_block(cfg, w, i, ls, x, cos, sin, mask, tap)
        if ls.mlp_present and ls.mlp_channels_kept > 0:
            x = x + _mlp_block(cfg, w, i, ls, x, tap)
    h = kernels.rms_norm(x, w["final_norm"], cfg.norm_eps)
    head = w["embed"] if cfg.tied_embeddings else w["lm_head"]
    return kernels.matmul(h, head.T)


# ---------------------------------------------------------------------------
# masking


def descriptor_without_block(desc: ArchDescriptor, block: BlockId) -> ArchDescriptor:
    """New descriptor with one block marked absent."""
    if not desc.block_present(block):
        raise StateError(f"block {block.kind}@{block.layer} is already absent")
    out = desc.copy()
    ls = out.layers[block.layer]
    if block.kind == ATTN:
        ls.attn_present, ls.heads_kept, ls.kv_heads_kept = False, 0, 0
    else:
        ls.mlp_present, ls.mlp_channels_kept = False, 0
    return out


def descriptor_with_trim(desc: ArchDescriptor, config: ModelConfig, block: BlockId,
                         drop_last: int) -> ArchDescriptor:
    """New descriptor with the trailing drop_last units of a block removed.

    Units are MLP channels or query heads; head drops must cover whole KV
    groups. A block trimmed to zero width is marked absent.
    """
    if not desc.block_present(block):
        raise StateError(f"block {block.kind}@{block.layer} is absent")
    if drop_last < 0:
        raise InputError("drop_last must be >= 0")
    out = desc.copy()
    ls = out.layers[block.layer]
    if block.kind == ATTN:
        g = config.group_size
        if drop_last % g != 0:
            raise InputError(f"head drop {drop_last} must be a multiple of the KV group size {g}")
        if drop_last > ls.heads_kept:
            raise InputError(f"cannot drop {drop_last} heads, only {ls.heads_kept} kept")
        ls.heads_kept -= drop_last
        ls.kv_heads_kept = ls.heads_kept // g
        ls.attn_present = ls.heads_kept > 0
    else:
        if drop_last > ls.mlp_channels_kept:
            raise InputError(f"cannot drop {drop_last} channels, only {ls.mlp_channels_kept} kept")
        ls.mlp_channels_kept -= drop_last
        ls.mlp_present = ls.mlp_channels_kept > 0
    return out


@contextmanager
def mask_block(model: TransformerModel, block: BlockId):
    """Scoped view of the model with one block absent.

    The yielded model shares weight arrays with the original; the original
    is untouched, so independent masks may be held concurrently.
    """
    yield model.with_descriptor(descriptor_without_block(model.descriptor, block))


@contextmanager
def mask_width(model: TransformerModel, block: BlockId, drop_last: int):
    """Scoped view with the trailing `drop_last` units of a block removed."""
    yield model.with_descriptor(descriptor_with_trim(model.descriptor, model.config, block, drop_last))


# ---------------------------------------------------------------------------
# materialization and checkpoint I/O


def materialize(model: TransformerModel, descriptor: ArchDescriptor) -> TransformerModel:
    """Physically shrink tensors down to the given descriptor.

    Equivalent to masking by construction: both paths run the same kernels
    on the same leading slices.
    """
    descriptor.validate(model.config)
    if not descriptor.le(model.descriptor):
        raise InputError("descriptor keeps structure the model no longer has")
    new_weights = {}
    for name, shape in tensor_layout(model.config, descriptor):
        src = model.weights[name]
        if len(shape) == 1:
            new_weights[name] = src.copy()
        else:
            new_weights[name] = np.ascontiguousarray(src[: shape[0], : shape[1]])
    return TransformerModel(model.config, new_weights, descriptor.copy())


def save_checkpoint(model: TransformerModel, path) -> None:
    """Write config.json, descriptor.json, index.json and weights.bin.

    Tensors are stored sliced to the descriptor, little-endian float32,
    concatenated in index order.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layout = tensor_layout(model.config, model.descriptor)
    index = []
    offset = 0
    with open(root / "weights.bin", "wb") as f:
        for name, shape in layout:
            src = model.weights[name]
            arr = src if len(shape) == 1 else src[: shape[0], : shape[1]]
            arr = np.ascontiguousarray(arr, dtype="<f4")
            if arr.shape != shape:
                raise InputError(f"tensor {name} has shape {arr.shape}, descriptor implies {shape}")
            f.write(arr.tobytes())
            index.append({"name": name, "shape": list(shape), "byte_offset": offset})
            offset += arr.nbytes
    (root / "config.json").write_text(json.dumps(model.config.to_json(), indent=1))
    (root / "descriptor.json").write_text(json.dumps(model.descriptor.to_json(), indent=1))
    (root / "index.json").write_text(json.dumps(index, indent=1))


def load_checkpoint(path) -> TransformerModel:
    """Inverse of save_checkpoint; bit-exact round trip.

    Raises FormatError naming the offending tensor on any mismatch between
    the index and what config + descriptor imply.
    """
    root = Path(path)
    for fname in ("config.json", "descriptor.json", "index.json", "weights.bin"):
        if not (root / fname).exists():
            raise FormatError(f"checkpoint {root} is missing {fname}")
    config = ModelConfig.from_json(json.loads((root / "config.json").read_text()))
    descriptor = ArchDescriptor.from_json(json.loads((root / "descriptor.json").read_text()))
    descriptor.validate(config)
    try:
        index = json.loads((root / "index.json").read_text())
        entries = {e["name"]: (tuple(e["shape"]), int(e["byte_offset"])) for e in index}
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad index.json: {e}") from e
    blob = (root / "weights.bin").read_bytes()
    weights = {}
    for name, shape in tensor_layout(config, descriptor):
        if name not in entries:
            raise FormatError(f"missing tensor {name}")
        got_shape, offset = entries.pop(name)
        if got_shape != shape:
            raise FormatError(f"tensor {name} has shape {got_shape}, expected {shape}")
        count = int(np.prod(shape))
        if offset < 0 or offset + 4 * count > len(blob):
            raise FormatError(f"tensor {name} extends past end of weights.bin")
        weights[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
    if entries:
        raise FormatError(f"unexpected tensor {next(iter(entries))}")
    return TransformerModel(config, weights, descriptor)


# ---------------------------------------------------------------------------
# incremental decoding with a key/value cache


class KVCache:
    """Per-layer rotated keys and values for token-by-token decoding."""

    def __init__(self, model: TransformerModel, max_len: int):
        cfg = model.config
        self.max_len = max_len
        self.length = 0
        self.k = []
        self.v = []
        for ls in model.descriptor.layers:
            kv = ls.kv_heads_kept
            self.k.append(np.zeros((max_len, kv, cfg.head_dim), dtype=np.float32))
            self.v.append(np.zeros((max_len, kv, cfg.head_dim), dtype=np.float32))


def _attn_cached(config, weights, i, ls, h, cache, t0, T):
    """Attention for positions [t0, t0+T) against cached keys up to t0+T."""
    hd = config.head_dim
    hq, kv = ls.heads_kept, ls.kv_heads_kept
    p = f"layers.{i}."
    cos, sin = rope_tables(config, T, start=t0)
    q = kernels.matmul(h, weights[p + "wq"][: hq * hd].T).reshape(T, hq, hd)
    k = kernels.matmul(h, weights[p + "wk"][: kv * hd].T).reshape(T, kv, hd)
    v = kernels.matmul(h, weights[p + "wv"][: kv * hd].T).reshape(T, kv, hd)
    q = apply_rope(q, cos, sin)
    cache.k[i][t0 : t0 + T] = apply_rope(k, cos, sin)
    cache.v[i][t0 : t0 + T] = v
    total = t0 + T
    kk = np.repeat(cache.k[i][:total].transpose(1, 0, 2), config.group_size, axis=0)
    vv = np.repeat(cache.v[i][:total].transpose(1, 0, 2), config.group_size, axis=0)
    q = q.transpose(1, 0, 2)
    scores = (kernels.bmm64(q, kk.transpose(0, 2, 1)) / math.sqrt(hd)).astype(np.float32)
    if T > 1:
        mask = np.triu(np.full((T, total), -np.inf, dtype=np.float32), k=t0 + 1)
        scores += mask
    probs = kernels.softmax_rows(scores.reshape(hq * T, total)).reshape(hq, T, total)
    ctx = kernels.bmm64(probs, vv).transpose(1, 0, 2).reshape(T, hq * hd).astype(np.float32)
    return kernels.matmul(ctx, weights[p + "wo"][:, : hq * hd].T)


def _forward_cached(model: TransformerModel, ids: np.ndarray, cache: KVCache) -> np.ndarray:
    cfg, w = model.config, model.weights
    t0 = cache.length
    T = ids.size
    if t0 + T > cache.max_len:
        raise InputError(f"cache overflow: {t0}+{T} > {cache.max_len}")
    x = w["embed"][ids]
    for i, ls in enumerate(model.descriptor.layers):
        if ls.attn_present and ls.heads_kept > 0:
            h = kernels.rms_norm(x, w[f"layers.{i}.attn_norm"], cfg.norm_eps)
            x = x + _attn_cached(cfg, w, i, ls, h, cache, t0, T)
        if ls.mlp_present and ls.mlp_channels_kept > 0:
            x = x + _mlp_block(cfg, w, i, ls, x)
    cache.length = t0 + T
    h = kernels.rms_norm(x, w["final_norm"], cfg.norm_eps)
    head = w["embed"] if cfg.tied_embeddings else w["lm_head"]
    return kernels.matmul(h, head.T)


def prefill(model: TransformerModel, tokens, cache: KVCache) -> np.ndarray:
    """Full-prompt forward that fills the cache; returns (T, vocab) logits."""
    ids = _check_tokens(model.config, tokens)
    if cache.length != 0:
        raise StateError("prefill requires an empty cache")
    return _forward_cached(model, ids, cache)


def decode_step(model: TransformerModel, token: int, cache: KVCache) -> np.ndarray:
    """Single-token step against the cache; returns (vocab,) logits."""
    ids = _check_tokens(model.config, [token])
    if cache.length == 0:
        raise StateError("decode_step requires a prefilled cache")
    return _forward_cached(model, ids, cache)[0]
