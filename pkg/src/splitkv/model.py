"""A small deterministic decoder-only transformer over a segmented KV cache.

Architecture: token embedding plus sinusoidal absolute positions, ``n_layers``
pre-norm blocks (LayerNorm, multi-head causal attention, residual, LayerNorm,
ReLU MLP of width 4D, residual), a final LayerNorm and an untied unembedding.

Weights are drawn from a SplitMix64 stream seeded by ``init_seed``, uniform
in [-0.1, 0.1], in this order: embedding (vocab x D); per layer wq, wk, wv,
wo (D x D), w1 (D x 4D), b1 (4D), w2 (4D x D), b2 (D); unembedding
(D x vocab). LayerNorm gains start at one and biases at zero.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .attention import CausalSpan, fuse_partials, full_attention, partial_attention
from .prng import SplitMix64
from .tensor import DimensionError, Matrix

LN_EPS = 1e-5
INIT_SCALE = 0.1


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int
    max_positions: int = 512
    init_seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.init_seed < 1 << 64:
            raise ValueError("init_seed must fit in 64 unsigned bits")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


class Origin(enum.IntEnum):
    CLOUD = 0
    EDGE = 1
    GENERATED = 2


@dataclass(eq=False)
class KVSegment:
    layer: int
    origin: Origin
    pos_offset: int
    k: Matrix
    v: Matrix

    def __post_init__(self):
        if self.k.shape != self.v.shape:
            raise DimensionError(f"k {self.k.shape} and v {self.v.shape} differ")

    @property
    def seq_len(self) -> int:
        return self.k.shape[0]

    @property
    def end(self) -> int:
        return self.pos_offset + self.seq_len

    def element_count(self) -> int:
        return self.k.size + self.v.size


@dataclass
class LayerWeights:
    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix
    w1: Matrix
    b1: np.ndarray
    w2: Matrix
    b2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f) for f in self.__dataclass_fields__]


@dataclass
class Model:
    config: ModelConfig
    embedding: Matrix
    layers: list[LayerWeights]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    unembed: Matrix
    _fingerprint: bytes | None = field(default=None, repr=False)

    def arrays(self) -> list[np.ndarray]:
        out = [self.embedding]
        for lw in self.layers:
            out.extend(lw.arrays())
        return out + [self.lnf_g, self.lnf_b, self.unembed]

    def weight_sum(self) -> float:
        return float(sum(a.sum() for a in self.arrays()))

    def layer_checksum(self, layer: int = 0) -> float:
        return float(sum(a.sum() for a in self.layers[layer].arrays()))

    def fingerprint(self) -> bytes:
        """8-byte digest of config and weights; both ends of a session must agree."""
        if self._fingerprint is None:
            h = hashlib.blake2b(digest_size=8)
            h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
            for a in self.arrays():
                h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
            self._fingerprint = h.digest()
        return self._fingerprint

    def set_embedding_rows(self, token_ids: Sequence[int], rows: Matrix) -> None:
        """Overwrite embedding rows, e.g. to plant recognizable sentinel tokens."""
        self.embedding = self.embedding.copy()
        self.embedding[list(token_ids)] = rows
        self._fingerprint = None


def init_model(config: ModelConfig) -> Model:
    D, F, V = config.d_model, 4 * config.d_model, config.vocab_size
    rng = SplitMix64(config.init_seed)

    def draw(*shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, shape)

    embedding = draw(V, D)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=draw(D, D), wk=draw(D, D), wv=draw(D, D), wo=draw(D, D),
                w1=draw(D, F), b1=draw(F), w2=draw(F, D), b2=draw(D),
                ln1_g=np.ones(D), ln1_b=np.zeros(D), ln2_g=np.ones(D), ln2_b=np.zeros(D),
            )
        )
    unembed = draw(D, V)
    return Model(config, embedding, layers, np.ones(D), np.zeros(D), unembed)


def layer_norm(x: Matrix, gain: np.ndarray, bias: np.ndarray) -> Matrix:
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def positional_encoding(positions: np.ndarray, d_model: int) -> Matrix:
    i = np.arange(d_model)
    freq = 1.0 / np.power(10000.0, (2 * (i // 2)) / d_model)
    angle = positions[:, None].astype(np.float64) * freq[None, :]
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def embed(model: Model, tokens: Sequence[int], pos_offset: int) -> Matrix:
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    bad = ids[(ids < 0) | (ids >= cfg.vocab_size)]
    if bad.size:
        raise ValueError(f"unknown token ids {bad.tolist()} for vocab_size={cfg.vocab_size}")
    if pos_offset < 0 or pos_offset + ids.size > cfg.max_positions:
        raise ValueError(
            f"positions [{pos_offset}, {pos_offset + ids.size}) exceed max_positions={cfg.max_positions}"
        )
    positions = np.arange(pos_offset, pos_offset + ids.size)
    return model.embedding[ids] + positional_encoding(positions, cfg.d_model)


def transformer_layer(
    model: Model,
    layer: int,
    hidden: Matrix,
    context: Sequence[KVSegment],
    pos_offset: int,
) -> tuple[Matrix, Matrix, Matrix]:
    """Run one block for ``hidden`` rows sitting at ``pos_offset`` onward.

    The new rows attend to every segment in ``context`` (earlier positions)
    and causally to themselves; per-segment partials are fused per head.
    Returns the block output together with the new rows' K and V.
    """
    cfg = model.config
    if hidden.ndim != 2 or hidden.shape[1] != cfg.d_model:
        raise DimensionError(f"hidden must be (n, {cfg.d_model}), got {hidden.shape}")
    w = model.layers[layer]
    x = layer_norm(hidden, w.ln1_g, w.ln1_b)
    q, k, v = x @ w.wq, x @ w.wk, x @ w.wv

    d = cfg.d_head
    heads = []
    for h in range(cfg.n_heads):
        cols = slice(h * d, (h + 1) * d)
        qh = q[:, cols]
        parts = [
            partial_attention(qh, seg.k[:, cols], seg.v[:, cols], CausalSpan(pos_offset, seg.pos_offset))
            for seg in context
        ]
        parts.append(partial_attention(qh, k[:, cols], v[:, cols], CausalSpan(pos_offset, pos_offset)))
        heads.append(fuse_partials(parts))
    hidden = hidden + np.hstack(heads) @ w.wo

    x = layer_norm(hidden, w.ln2_g, w.ln2_b)
    hidden = hidden + np.maximum(x @ w.w1 + w.b1, 0.0) @ w.w2 + w.b2
    return hidden, k, v


def logits(model: Model, hidden: Matrix) -> Matrix:
    return layer_norm(hidden, model.lnf_g, model.lnf_b) @ model.unembed


def greedy(row_logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties
    return int(np.argmax(row_logits))


class SegmentedCache:
    """Per-layer ordered KV segments: cloud, then edge, then generated."""

    def __init__(self, n_layers: int):
        self.layers: list[list[KVSegment]] = [[] for _ in range(n_layers)]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def __len__(self) -> int:
        return self.end

    @property
    def start(self) -> int:
        segs = self.layers[0]
        return segs[0].pos_offset if segs else 0

    @property
    def end(self) -> int:
        segs = self.layers[0]
        return segs[-1].end if segs else 0

    def is_empty(self) -> bool:
        return not self.layers[0]

    def segments(self, layer: int) -> list[KVSegment]:
        return self.layers[layer]

    def origins(self) -> list[Origin]:
        return [s.origin for s in self.layers[0]]

    def append(self, new: Sequence[KVSegment]) -> None:
        """Append one segment per layer; same-origin runs are merged."""
        if len(new) != self.n_layers:
            raise CacheError(f"expected {self.n_layers} segments, got {len(new)}")
        for layer, seg in enumerate(new):
            if seg.layer != layer:
                raise CacheError(f"segment for layer {seg.layer} given in slot {layer}")
            segs = self.layers[layer]
            if segs:
                last = segs[-1]
                if seg.pos_offset != last.end:
                    raise CacheError(f"layer {layer}: gap or overlap at position {seg.pos_offset}, cache ends at {last.end}")
                if seg.origin < last.origin:
                    raise CacheError(f"layer {layer}: {seg.origin.name} segment after {last.origin.name}")
                if seg.origin == last.origin:
                    segs[-1] = KVSegment(
                        layer, last.origin, last.pos_offset,
                        np.vstack([last.k, seg.k]), np.vstack([last.v, seg.v]),
                    )
                    continue
            segs.append(seg)
        self.validate()

    def validate(self) -> None:
        ref = [(s.origin, s.pos_offset, s.seq_len) for s in self.layers[0]]
        for layer, segs in enumerate(self.layers):
            spans = [(s.origin, s.pos_offset, s.seq_len) for s in segs]
            if spans != ref:
                raise CacheError(f"layer {layer} covers {spans}, layer 0 covers {ref}")
            for a, b in zip(segs, segs[1:]):
                if b.pos_offset != a.end or b.origin <= a.origin:
                    raise CacheError(f"layer {layer}: segments out of order or not contiguous")


def prefill(
    model: Model,
    tokens: Sequence[int],
    origin: Origin,
    pos_offset: int,
    visible_cache: SegmentedCache,
) -> tuple[Matrix, list[KVSegment]]:
    """Process ``tokens`` against everything already in ``visible_cache``.

    The cache is not modified; the caller appends the returned segments.
    """
    cfg = model.config
    if visible_cache.n_layers != cfg.n_layers:
        raise CacheError(f"cache has {visible_cache.n_layers} layers, model has {cfg.n_layers}")
    if pos_offset != visible_cache.end:
        raise CacheError(f"pos_offset={pos_offset} but the visible cache ends at {visible_cache.end}")
    hidden = embed(model, tokens, pos_offset)
    new = []
    for layer in range(cfg.n_layers):
        hidden, k, v = transformer_layer(model, layer, hidden, visible_cache.segments(layer), pos_offset)
        new.append(KVSegment(layer, Origin(origin), pos_offset, k, v))
    return hidden, new


def decode_step(model: Model, cache: SegmentedCache, last_token: int) -> tuple[int, np.ndarray]:
    if cache.is_empty():
        raise CacheError("decode needs a non-empty cache")
    cache.validate()
    hidden, new = prefill(model, [last_token], Origin.GENERATED, cache.end, cache)
    cache.append(new)
    row = logits(model, hidden[-1:])[0]
    return greedy(row), row


def rollout(model: Model, cache: SegmentedCache, last_hidden: Matrix, n_steps: int) -> list[int]:
    """Greedy tokens: the first from the prompt's last hidden row, the rest by decode."""
    if n_steps <= 0:
        return []
    tok = greedy(logits(model, last_hidden[-1:])[0])
    out = [tok]
    for _ in range(n_steps - 1):
        tok, _ = decode_step(model, cache, tok)
        out.append(tok)
    return out


def split_generate(
    model: Model, cloud_tokens: Sequence[int], edge_tokens: Sequence[int], n_steps: int
) -> list[int]:
    """In-process cloud prefill, edge prefill against the cloud KV, then decode."""
    cache = SegmentedCache(model.config.n_layers)
    _, cloud_kv = prefill(model, cloud_tokens, Origin.CLOUD, 0, cache)
    cache.append(cloud_kv)
    hidden, edge_kv = prefill(model, edge_tokens, Origin.EDGE, len(cloud_tokens), cache)
    cache.append(edge_kv)
    return rollout(model, cache, hidden, n_steps)


def monolithic_generate(model: Model, tokens: Sequence[int], n_steps: int) -> list[int]:
    """Whole prompt prefilled as a single segment on one device."""
    cache = SegmentedCache(model.config.n_layers)
    hidden, kv = prefill(model, tokens, Origin.EDGE, 0, cache)
    cache.append(kv)
    return rollout(model, cache, hidden, n_steps)


def reference_forward(model: Model, tokens: Sequence[int]) -> Matrix:
    """Cache-free forward pass with plain causal attention; returns all logits."""
    cfg = model.config
    hidden = embed(model, tokens, 0)
    d = cfg.d_head
    for w in model.layers:
        x = layer_norm(hidden, w.ln1_g, w.ln1_b)
        q, k, v = x @ w.wq, x @ w.wk, x @ w.wv
        heads = [
            full_attention(q[:, h * d:(h + 1) * d], k[:, h * d:(h + 1) * d], v[:, h * d:(h + 1) * d], CausalSpan())
            for h in range(cfg.n_heads)
        ]
        hidden = hidden + np.hstack(heads) @ w.wo
        x = layer_norm(hidden, w.ln2_g, w.ln2_b)
        hidden = hidden + np.maximum(x @ w.w1 + w.b1, 0.0) @ w.w2 + w.b2
    return logits(model, hidden)


def reference_generate(model: Model, tokens: Sequence[int], n_steps: int) -> list[int]:
    """Greedy decoding that recomputes the full sequence every step."""
    seq = list(tokens)
    out = []
    for _ in range(n_steps):
        tok = greedy(reference_forward(model, seq)[-1])
        out.append(tok)
        seq.append(tok)
    return out
