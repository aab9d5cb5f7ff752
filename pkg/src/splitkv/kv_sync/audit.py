"""Scan captured wire bytes for anything derived from the edge prompt.

Two kinds of evidence count as a leak: an edge token-id run in a common
integer encoding, or a byte pattern taken from edge-side KV (or sentinel
embedding rows). Token runs are matched as windows long enough that each
pattern spans at least ``MIN_PATTERN_BYTES``; shorter windows of small ids
collide with ordinary header fields.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..model import Model, Origin, SegmentedCache
from .transport import WireCapture

TOKEN_WINDOW = 4
MIN_PATTERN_BYTES = 16
_INT_CODECS = {"u16le": "<H", "u32le": "<I", "u64le": "<Q", "u32be": ">I"}


@dataclass(frozen=True)
class Violation:
    kind: str
    direction: str
    offset: int
    detail: str


@dataclass
class AuditReport:
    violations: list[Violation] = field(default_factory=list)
    bytes_scanned: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def no_traffic(self) -> bool:
        return self.bytes_scanned == 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.no_traffic:
            return "no traffic"
        if self.ok:
            return f"clean ({self.bytes_scanned} bytes scanned)"
        kinds = sorted({v.kind for v in self.violations})
        return f"{len(self.violations)} violation(s): {', '.join(kinds)}"


def _windows(tokens: list[int], w: int) -> Iterable[list[int]]:
    w = min(w, len(tokens))
    for i in range(len(tokens) - w + 1):
        yield tokens[i:i + w]


def token_patterns(edge_tokens: Sequence[int], window: int = TOKEN_WINDOW) -> list[tuple[str, bytes]]:
    tokens = [int(t) for t in edge_tokens]
    if len(tokens) < 2:
        return []
    out = []
    seen = set()

    def add(name, pat):
        if pat not in seen:
            seen.add(pat)
            out.append((name, pat))

    for name, code in _INT_CODECS.items():
        width = struct.calcsize(code)
        for run in _windows(tokens, max(window, -(-MIN_PATTERN_BYTES // width))):
            try:
                add(f"edge token ids {run} as {name}", struct.pack(f"{code[0]}{len(run)}{code[1]}", *run))
            except struct.error:
                continue
    for run in _windows(tokens, window):
        for sep in (",", " "):
            add(f"edge token ids {run} as text", sep.join(map(str, run)).encode())
    return out


def kv_sentinels(
    cache: SegmentedCache,
    n_heads: int,
    origins: Iterable[Origin] = (Origin.EDGE, Origin.GENERATED),
) -> list[bytes]:
    """Per-row and per-head float64 byte patterns of edge-side KV.

    Patterns that also occur in the cache's cloud KV are dropped: those bytes
    legitimately cross the wire and say nothing about the edge prompt (this
    happens for degenerate widths where every row normalizes to the same
    vector).
    """
    wanted = set(origins)
    pats: set[bytes] = set()
    cloud = []
    for segs in cache.layers:
        for seg in segs:
            if seg.origin not in wanted:
                cloud += [np.ascontiguousarray(m, dtype="<f8").tobytes() for m in (seg.k, seg.v)]
                continue
            d = seg.k.shape[1] // n_heads
            for mat in (seg.k, seg.v):
                le = np.ascontiguousarray(mat, dtype="<f8")
                for row in le:
                    pats.add(row.tobytes())
                    for h in range(n_heads):
                        pats.add(row[h * d:(h + 1) * d].tobytes())
    blob = b"|".join(cloud)
    return sorted(p for p in pats if p not in blob)


def embedding_sentinels(model: Model, token_ids: Sequence[int]) -> list[bytes]:
    rows = np.ascontiguousarray(model.embedding[list(token_ids)], dtype="<f8")
    return [r.tobytes() for r in rows]


def plant_sentinels(model: Model, token_ids: Sequence[int]) -> None:
    """Give ``token_ids`` recognizable embedding rows (distinct from init range)."""
    D = model.config.d_model
    rows = np.array([[0.75 + 0.001 * i + 1e-6 * j for j in range(D)] for i in range(len(token_ids))])
    model.set_embedding_rows(token_ids, rows)


def _find_all(haystack: bytes, needle: bytes) -> Iterable[int]:
    start = haystack.find(needle)
    while start != -1:
        yield start
        start = haystack.find(needle, start + 1)


def privacy_audit(
    wire_capture: WireCapture | bytes,
    edge_tokens: Sequence[int],
    edge_kv_sentinels: Sequence[bytes] = (),
) -> AuditReport:
    if isinstance(wire_capture, WireCapture):
        streams = wire_capture.directions()
    else:
        streams = {"stream": bytes(wire_capture)}
    report = AuditReport(bytes_scanned=sum(len(s) for s in streams.values()))
    if report.no_traffic:
        report.notes.append("no traffic")
        return report
    tok_pats = token_patterns(edge_tokens)
    if len(edge_tokens) < 2:
        report.notes.append("edge prompt shorter than two tokens; token-id scan skipped")
    for direction, data in streams.items():
        for name, pat in tok_pats:
            for off in _find_all(data, pat):
                report.violations.append(Violation("edge-token-ids", direction, off, name))
        for i, pat in enumerate(edge_kv_sentinels):
            if not pat:
                continue
            for off in _find_all(data, pat):
                report.violations.append(Violation("edge-kv-bytes", direction, off, f"sentinel #{i}"))
    return report
