import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitkv.attention import (
    CausalSpan,
    MaskedRowError,
    PartialAttention,
    full_attention,
    fuse_partials,
    fusion_weights,
    merge_partials,
    partial_attention,
)
from splitkv.tensor import DimensionError


def oracle_attention(q, k, v, span=None, keys=None):
    """Plain-Python softmax attention, optionally restricted to key indices ``keys``.

    Returns (out rows, lse per row); rows with no visible key give (None, -inf).
    """
    d = q.shape[1]
    keys = range(k.shape[0]) if keys is None else keys
    outs, lses = [], []
    for i in range(q.shape[0]):
        vis = []
        for j in keys:
            if span is not None and span.key_offset + j > span.query_offset + i:
                continue
            vis.append((sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d), j))
        if not vis:
            outs.append(None)
            lses.append(-math.inf)
            continue
        m = max(s for s, _ in vis)
        w = [(math.exp(s - m), j) for s, j in vis]
        z = math.fsum(x for x, _ in w)
        outs.append([math.fsum(x * v[j, c] for x, j in w) / z for c in range(v.shape[1])])
        lses.append(m + math.log(z))
    return outs, lses


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


def test_single_key():
    out = full_attention(np.array([[1.0]]), np.array([[1.0]]), np.array([[7.0]]), CausalSpan())
    assert out.tolist() == [[7.0]]


def test_uniform_scores_average_visible_values(rng):
    k = np.tile(rng.normal(size=(1, 4)), (5, 1))
    v = rng.normal(size=(5, 3))
    q = rng.normal(size=(5, 4))
    out = full_attention(q, k, v, CausalSpan(0, 0))
    for i in range(5):
        assert np.allclose(out[i], v[: i + 1].mean(axis=0), atol=1e-12)


def test_unmasked_matches_direct_oracle(rng):
    q, k, v = rng.normal(size=(4, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    want, _ = oracle_attention(q, k, v)
    assert np.max(np.abs(full_attention(q, k, v) - np.array(want))) <= 1e-12


def test_causal_offsets(rng):
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(7, 4)), rng.normal(size=(7, 2))
    span = CausalSpan(query_offset=4, key_offset=0)
    want, _ = oracle_attention(q, k, v, span)
    assert np.max(np.abs(full_attention(q, k, v, span) - np.array(want))) <= 1e-12


def test_fully_masked_row_is_error():
    q = np.ones((2, 2))
    kv = np.ones((3, 2))
    with pytest.raises(MaskedRowError):
        full_attention(q, kv, kv, CausalSpan(query_offset=0, key_offset=1))
    with pytest.raises(MaskedRowError):
        full_attention(q, np.zeros((0, 2)), np.zeros((0, 2)))


def test_shape_errors():
    with pytest.raises(DimensionError):
        full_attention(np.ones((1, 3)), np.ones((2, 4)), np.ones((2, 4)))
    with pytest.raises(DimensionError):
        partial_attention(np.ones((1, 3)), np.ones((2, 3)), np.ones((3, 3)))
    with pytest.raises(DimensionError):
        fuse_partials([PartialAttention.empty(2, 3), PartialAttention.empty(3, 3)])


def test_partial_over_whole_context_equals_full(rng):
    q, k, v = rng.normal(size=(5, 6)), rng.normal(size=(9, 6)), rng.normal(size=(9, 6))
    span = CausalSpan(4, 0)
    part = partial_attention(q, k, v, span)
    assert np.array_equal(part.out, full_attention(q, k, v, span))
    assert part.n_keys == 9


def test_empty_segment_is_identity():
    p = partial_attention(np.ones((3, 2)), np.zeros((0, 2)), np.zeros((0, 2)))
    assert p.n_keys == 0
    assert np.array_equal(p.out, np.zeros((3, 2)))
    assert np.all(p.lse == -np.inf)


def test_segments_match_restricted_oracle(rng):
    q, k, v = rng.normal(size=(4, 5)), rng.normal(size=(10, 5)), rng.normal(size=(10, 5))
    span = CausalSpan(query_offset=6, key_offset=0)
    for keys, (lo, hi) in (((0, 1, 2), (0, 3)), (tuple(range(3, 10)), (3, 10))):
        part = partial_attention(q, k[lo:hi], v[lo:hi], CausalSpan(6, lo))
        want_out, want_lse = oracle_attention(q, k, v, span, keys)
        for i in range(4):
            if want_out[i] is None:
                assert part.lse[i] == -np.inf and np.all(part.out[i] == 0)
            else:
                assert part.lse[i] == pytest.approx(want_lse[i], abs=1e-12)
                assert np.max(np.abs(part.out[i] - want_out[i])) <= 1e-12


def test_single_partial_returned_unchanged(rng):
    p = partial_attention(rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4)))
    assert fuse_partials([p]) is p.out
    alpha, _ = fusion_weights([p])
    assert np.all(alpha == 1.0)


def test_identical_segments_split_evenly(rng):
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    a, b = partial_attention(q, k, v), partial_attention(q, k.copy(), v.copy())
    alpha, _ = fusion_weights([a, b])
    assert np.all(alpha == 0.5)
    assert np.allclose(fuse_partials([a, b]), a.out, atol=1e-15)


def test_cloud_edge_split_matches_monolithic(rng):
    cloud, edge, d = 13, 9, 8
    k, v = rng.normal(size=(cloud + edge, d)), rng.normal(size=(cloud + edge, d))
    q = rng.normal(size=(edge, d))
    span = CausalSpan(cloud, 0)
    parts = [
        partial_attention(q, k[:cloud], v[:cloud], CausalSpan(cloud, 0)),
        partial_attention(q, k[cloud:], v[cloud:], CausalSpan(cloud, cloud)),
    ]
    assert rel_err(fuse_partials(parts), full_attention(q, k, v, span)) <= 1e-9


def test_all_parts_masked_is_error():
    with pytest.raises(MaskedRowError):
        fuse_partials([PartialAttention.empty(2, 3), PartialAttention.empty(2, 3)])


@st.composite
def split_case(draw):
    n_keys = draw(st.integers(1, 64))
    n_q = draw(st.integers(1, 16))
    d = draw(st.integers(1, 16))
    n_seg = draw(st.integers(1, min(4, n_keys)))
    cuts = sorted(draw(st.lists(st.integers(1, n_keys - 1), min_size=n_seg - 1, max_size=n_seg - 1, unique=True))) if n_keys > 1 else []
    causal = draw(st.booleans())
    seed = draw(st.integers(0, 2**32 - 1))
    return n_keys, n_q, d, [0, *cuts, n_keys], causal, seed


def split_and_fuse(n_keys, n_q, d, bounds, causal, seed):
    g = np.random.default_rng(seed)
    q, k, v = g.normal(size=(n_q, d)) * 2, g.normal(size=(n_keys, d)) * 2, g.normal(size=(n_keys, d))
    # queries are the last n_q positions of the context when causal
    q_off = max(n_keys - n_q, 0)
    span = CausalSpan(q_off, 0) if causal else None
    parts = [
        partial_attention(q, k[lo:hi], v[lo:hi], CausalSpan(q_off, lo) if causal else None)
        for lo, hi in zip(bounds, bounds[1:])
    ]
    return parts, full_attention(q, k, v, span)


@settings(max_examples=300, deadline=None)
@given(split_case())
def test_splitting_invariance(case):
    parts, want = split_and_fuse(*case)
    assert rel_err(fuse_partials(parts), want) <= 1e-9
    alpha, _ = fusion_weights(parts)
    assert np.all((alpha >= 0) & (alpha <= 1))
    assert np.all(np.abs(alpha.sum(axis=0) - 1) <= 1e-12)


@settings(max_examples=200, deadline=None)
@given(split_case().filter(lambda c: len(c[3]) == 4))
def test_pairwise_fusion_is_associative(case):
    parts, _ = split_and_fuse(*case)
    a, b, c = parts
    nested = merge_partials([merge_partials([a, b]), c])
    flat = merge_partials([a, b, c])
    assert np.max(np.abs(nested.out - flat.out)) <= 1e-12
    assert np.allclose(nested.lse, flat.lse, rtol=0, atol=1e-12)
