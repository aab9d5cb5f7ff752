"""Causal attention over whole contexts and over key/value segments.

A segment's attention is carried as its normalized output plus the per-row
log-sum-exp of its scores. Two or more such partials recombine exactly into
attention over the concatenated keys, weighting each partial by
``exp(lse_p - logsumexp_p(lse_p))``. All functions act on a single head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import DimensionError, Matrix, row_softmax_lse


class MaskedRowError(ValueError):
    """A query row can see no key at all."""


@dataclass(frozen=True)
class CausalSpan:
    query_offset: int = 0
    key_offset: int = 0

    def __post_init__(self):
        if self.query_offset < 0 or self.key_offset < 0:
            raise ValueError(f"negative offset in {self}")


@dataclass(frozen=True, eq=False)
class PartialAttention:
    out: Matrix
    lse: np.ndarray
    n_keys: int

    def __post_init__(self):
        if self.out.shape[0] != self.lse.shape[0]:
            raise DimensionError(
                f"partial has {self.out.shape[0]} output rows but {self.lse.shape[0]} lse entries"
            )

    @classmethod
    def empty(cls, n_query: int, d_head: int) -> "PartialAttention":
        return cls(np.zeros((n_query, d_head)), np.full(n_query, -np.inf), 0)


def _check_shapes(q: Matrix, k: Matrix, v: Matrix) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(f"q, k, v must be 2-D, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query width {q.shape} does not match key width {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key rows {k.shape} do not match value rows {v.shape}")


def _masked_scores(q: Matrix, k: Matrix, span: CausalSpan | None) -> Matrix:
    scores = (q @ k.T) / math.sqrt(q.shape[1])
    if span is not None:
        q_pos = span.query_offset + np.arange(q.shape[0])
        k_pos = span.key_offset + np.arange(k.shape[0])
        scores = np.where(k_pos[None, :] > q_pos[:, None], -np.inf, scores)
    return scores


def partial_attention(
    q: Matrix, seg_k: Matrix, seg_v: Matrix, span: CausalSpan | None = None
) -> PartialAttention:
    """Attention of ``q`` restricted to one key/value segment.

    ``span=None`` disables the causal mask. Query rows that see no key in the
    segment get a zero output row and ``lse = -inf``.
    """
    _check_shapes(q, seg_k, seg_v)
    n_keys = seg_k.shape[0]
    if n_keys == 0:
        return PartialAttention.empty(q.shape[0], seg_v.shape[1])
    probs, lse = row_softmax_lse(_masked_scores(q, seg_k, span))
    return PartialAttention(probs @ seg_v, lse, n_keys)


def full_attention(q: Matrix, k: Matrix, v: Matrix, span: CausalSpan | None = None) -> Matrix:
    _check_shapes(q, k, v)
    if k.shape[0] == 0:
        raise MaskedRowError("attention over an empty key set")
    probs, lse = row_softmax_lse(_masked_scores(q, k, span))
    dead = np.flatnonzero(~np.isfinite(lse))
    if dead.size:
        raise MaskedRowError(f"query rows {dead.tolist()} see no visible key")
    return probs @ v


def _stack(parts: Sequence[PartialAttention]) -> tuple[np.ndarray, np.ndarray]:
    if not parts:
        raise ValueError("need at least one partial")
    shape = parts[0].out.shape
    for p in parts[1:]:
        if p.out.shape != shape:
            raise DimensionError(f"partials disagree on shape: {shape} vs {p.out.shape}")
    return np.stack([p.lse for p in parts]), np.stack([p.out for p in parts])


def fusion_weights(parts: Sequence[PartialAttention]) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mixing weights, shape (n_parts, n_query), and the merged lse.

    Rows with no visible key in any part get zero weights and ``-inf``.
    """
    lses, _ = _stack(parts)
    top = lses.max(axis=0)
    live = np.isfinite(top)
    shift = np.where(live, top, 0.0)
    e = np.exp(lses - shift)
    total = e.sum(axis=0)
    with np.errstate(divide="ignore"):
        merged = np.where(live, shift + np.log(np.where(live, total, 1.0)), -np.inf)
    alpha = np.where(live, e / np.where(live, total, 1.0), 0.0)
    return alpha, merged


def merge_partials(parts: Sequence[PartialAttention]) -> PartialAttention:
    """Combine partials into one partial covering all their keys."""
    _, outs = _stack(parts)
    alpha, merged = fusion_weights(parts)
    out = np.einsum("pi,pid->id", alpha, outs)
    return PartialAttention(out, merged, sum(p.n_keys for p in parts))


def fuse_partials(parts: Sequence[PartialAttention]) -> Matrix:
    if len(parts) == 1 and np.isfinite(parts[0].lse).all():
        return parts[0].out
    fused = merge_partials(parts)
    dead = np.flatnonzero(~np.isfinite(fused.lse))
    if dead.size:
        raise MaskedRowError(f"query rows {dead.tolist()} are masked in every partial")
    return fused.out
