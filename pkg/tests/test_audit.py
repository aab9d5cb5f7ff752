import struct

import numpy as np

from splitkv.kv_sync import kv_sentinels, privacy_audit
from splitkv.kv_sync.audit import MIN_PATTERN_BYTES, token_patterns
from splitkv.kv_sync.wire import SessionInit, encode_frame
from splitkv.model import KVSegment, Origin, SegmentedCache


def test_patterns_are_long_enough():
    pats = token_patterns(list(range(20)))
    binary = [p for name, p in pats if "as text" not in name]
    assert min(len(p) for p in binary) >= MIN_PATTERN_BYTES
    assert len(token_patterns([3])) == 0


def test_short_prompt_matched_whole():
    tokens = [9, 8, 7]
    leak = b"\x00" * 5 + struct.pack("<3H", *tokens)
    report = privacy_audit(leak, tokens)
    assert [v.detail for v in report.violations] == ["edge token ids [9, 8, 7] as u16le"]


def test_small_ids_do_not_collide_with_header_fields():
    # session 39 / prompt 38 encode as 27 00 00 00 26 00 00 00
    init = encode_frame(SessionInit(39, 38, b"\x11" * 8, 9))
    assert privacy_audit(init, [43, 17, 29, 0, 39, 0, 38, 21, 35]).ok


def test_text_encoding_detected():
    report = privacy_audit(b"prompt=12,13,14,15;", [12, 13, 14, 15, 16])
    assert not report.ok


def test_kv_patterns_shared_with_cloud_are_not_sentinels():
    cache = SegmentedCache(1)
    zeros = np.zeros((2, 2))
    cache.append([KVSegment(0, Origin.CLOUD, 0, zeros, zeros)])
    edge_k = np.array([[0.0, 0.0], [0.5, 0.25]])
    cache.append([KVSegment(0, Origin.EDGE, 2, edge_k, edge_k)])
    pats = kv_sentinels(cache, n_heads=2)
    assert np.zeros(1).tobytes() not in pats and np.zeros(2).tobytes() not in pats
    assert np.array([0.5, 0.25]).tobytes() in pats
    assert np.array([0.5]).tobytes() in pats
