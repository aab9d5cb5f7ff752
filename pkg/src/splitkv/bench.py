"""Workload generation and simulated benchmarks for split vs monolithic serving.

Costs come from a linear per-layer model: for a span of ``n`` tokens a device
spends ``a * n + b`` seconds per layer. In split (``edgeprompt``) mode the
cloud computes the cloud prompt, the link carries its KV (proportional to
cloud length) and the edge computes the edge prompt; the prefill makespan is
the overlapped pipeline total. Requests sharing a group share a cloud prompt
whose KV is cached at the cloud after the first request, so later requests
skip cloud compute but still pay the link. In ``monolithic`` mode one device
prefills the whole prompt with no reuse.

Each request yields ``decode_steps`` tokens; the first comes out of prefill,
each further one costs one decode step on the edge.
"""

from __future__ import annotations

import csv
import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .pipeline import TimingProfile, closed_form_total
from .prng import SplitMix64

DEFAULT_DECODE_STEPS = 128
DEFAULT_SWEEP = (64, 128, 256, 512, 1024)
CSV_HEADER = ["request_id", "arrival", "start", "end", "tokens", "latency_per_token"]

MODES = ("edgeprompt", "monolithic")


@dataclass(frozen=True)
class Workload:
    n_requests: int
    group_size: int = 1
    cloud_len: int = 512
    edge_len: int = 512
    arrival: str = "batch"
    rate: float = 0.0
    seed: int = 0
    decode_steps: int = DEFAULT_DECODE_STEPS

    def __post_init__(self):
        if self.n_requests < 0:
            raise ValueError("n_requests must be non-negative")
        if self.group_size < 1:
            raise ValueError("group_size must be positive")
        if self.arrival not in ("batch", "poisson"):
            raise ValueError(f"unknown arrival process {self.arrival!r}")
        if self.arrival == "batch" and self.n_requests % self.group_size:
            raise ValueError(f"group_size={self.group_size} does not divide n_requests={self.n_requests}")
        if self.arrival == "poisson" and not (self.rate > 0 and math.isfinite(self.rate)):
            raise ValueError(f"poisson arrivals need a positive rate, got {self.rate}")
        if self.decode_steps < 1:
            raise ValueError("decode_steps must be at least 1")


@dataclass(frozen=True)
class CostModel:
    a_cloud: float = 2e-6
    b_cloud: float = 2e-4
    a_edge: float = 1e-5
    b_edge: float = 1e-3
    a_link: float = 4e-6
    b_link: float = 2e-3
    L: int = 32
    t_prefix: float = 0.05

    @classmethod
    def load(cls, path) -> "CostModel":
        with open(path) as f:
            d = json.load(f)
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def profile(self, cloud_len: int, edge_len: int, cached: bool = False) -> TimingProfile:
        t_cc = 0.0 if cached else self.a_cloud * cloud_len + self.b_cloud
        t_ct = self.a_link * cloud_len + self.b_link
        t_ec = self.a_edge * edge_len + self.b_edge
        return TimingProfile.constant(self.L, t_cc, t_ct, t_ec, self.t_prefix)

    def split_prefill(self, cloud_len: int, edge_len: int, cached: bool = False) -> float:
        return closed_form_total(self.profile(cloud_len, edge_len, cached))

    def monolithic_prefill(self, cloud_len: int, edge_len: int, device: str = "edge") -> float:
        a, b = self._device(device)
        return self.t_prefix + self.L * (a * (cloud_len + edge_len) + b)

    def decode_step(self, device: str = "edge") -> float:
        a, b = self._device(device)
        return self.L * (a + b)

    def _device(self, device: str) -> tuple[float, float]:
        if device == "edge":
            return self.a_edge, self.b_edge
        if device == "cloud":
            return self.a_cloud, self.b_cloud
        raise ValueError(f"unknown device {device!r}")


@dataclass(frozen=True)
class RequestRow:
    request_id: int
    arrival: float
    start: float
    end: float
    tokens: int

    @property
    def latency_per_token(self) -> float:
        return (self.end - self.arrival) / self.tokens if self.tokens else 0.0


@dataclass
class BenchResult:
    rows: list[RequestRow] = field(default_factory=list)

    @property
    def total_tokens(self) -> int:
        return sum(r.tokens for r in self.rows)

    @property
    def span(self) -> float:
        if not self.rows:
            return 0.0
        return max(r.end for r in self.rows) - min(r.arrival for r in self.rows)

    @property
    def throughput_tokens_per_s(self) -> float:
        return self.total_tokens / self.span if self.span > 0 else 0.0

    @property
    def throughput_req_per_s(self) -> float:
        return len(self.rows) / self.span if self.span > 0 else 0.0

    def latency_summary(self) -> dict[str, float]:
        if not self.rows:
            return {"mean": 0.0, "p50": 0.0, "p99": 0.0}
        lat = np.array([r.latency_per_token for r in self.rows])
        return {"mean": float(lat.mean()), "p50": float(np.percentile(lat, 50)), "p99": float(np.percentile(lat, 99))}


def gen_arrivals(w: Workload) -> tuple[list[float], list[int]]:
    """Arrival times and group ids; group ``i // group_size``."""
    groups = [i // w.group_size for i in range(w.n_requests)]
    if w.arrival == "batch":
        return [0.0] * w.n_requests, groups
    rng = SplitMix64(w.seed)
    t, times = 0.0, []
    for _ in range(w.n_requests):
        t += rng.exponential(w.rate)
        times.append(t)
    return times, groups


def _prefill_costs(w: Workload, mode: str, cost: CostModel, groups: Sequence[int], device: str) -> list[float]:
    if mode == "monolithic":
        return [cost.monolithic_prefill(w.cloud_len, w.edge_len, device)] * len(groups)
    if mode != "edgeprompt":
        raise ValueError(f"unknown mode {mode!r}")
    cold = cost.split_prefill(w.cloud_len, w.edge_len, cached=False)
    warm = cost.split_prefill(w.cloud_len, w.edge_len, cached=True)
    seen: set[int] = set()
    out = []
    for g in groups:
        out.append(warm if g in seen else cold)
        seen.add(g)
    return out


def run_batch(w: Workload, mode: str, cost_model: CostModel, device: str = "edge") -> BenchResult:
    """Requests submitted back to back; each runs alone to completion."""
    arrivals, groups = gen_arrivals(w)
    prefill = _prefill_costs(w, mode, cost_model, groups, device)
    step = cost_model.decode_step(device if mode == "monolithic" else "edge")
    rows, free = [], 0.0
    for i, (arr, pf) in enumerate(zip(arrivals, prefill)):
        start = max(free, arr)
        end = start + pf + (w.decode_steps - 1) * step
        rows.append(RequestRow(i, arr, start, end, w.decode_steps))
        free = end
    return BenchResult(rows)


def run_interactive(w: Workload, mode: str, cost_model: CostModel, device: str = "edge") -> BenchResult:
    """Open-loop serving: a FIFO prefill pipeline feeding a round-robin decoder.

    One prefill runs at a time. Once a request's prompt is processed it joins
    the decode rotation, which grants one step per active request in turn.
    """
    arrivals, groups = gen_arrivals(w)
    prefill = _prefill_costs(w, mode, cost_model, groups, device)
    step = cost_model.decode_step(device if mode == "monolithic" else "edge")

    starts, ready, free = [], [], 0.0
    for arr, pf in zip(arrivals, prefill):
        s = max(free, arr)
        starts.append(s)
        free = s + pf
        ready.append(free)

    remaining = [w.decode_steps - 1] * w.n_requests
    ends = list(ready)
    order = sorted(range(w.n_requests), key=lambda i: (ready[i], i))
    pending = deque(i for i in order if remaining[i] > 0)
    active: deque[int] = deque()
    t = 0.0
    while pending or active:
        if not active:
            t = max(t, ready[pending[0]])
        while pending and ready[pending[0]] <= t:
            active.append(pending.popleft())
        i = active.popleft()
        t += step
        remaining[i] -= 1
        while pending and ready[pending[0]] <= t:
            active.append(pending.popleft())
        if remaining[i]:
            active.append(i)
        else:
            ends[i] = t

    rows = [RequestRow(i, arrivals[i], starts[i], ends[i], w.decode_steps) for i in range(w.n_requests)]
    return BenchResult(rows)


def sweep_batch(
    cost_model: CostModel,
    cloud_lens: Sequence[int] = DEFAULT_SWEEP,
    edge_len: int = 512,
    n_requests: int = 1000,
    n_groups: int = 100,
    decode_steps: int = DEFAULT_DECODE_STEPS,
) -> list[tuple[int, BenchResult, BenchResult]]:
    out = []
    for c in cloud_lens:
        w = Workload(n_requests, n_requests // n_groups, c, edge_len, decode_steps=decode_steps)
        out.append((c, run_batch(w, "edgeprompt", cost_model), run_batch(w, "monolithic", cost_model)))
    return out


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def emit_csv(r: BenchResult, path) -> None:
    rows = [[row.request_id, row.arrival, row.start, row.end, row.tokens, row.latency_per_token] for row in r.rows]
    if r.rows:
        summary = ["summary", min(x.arrival for x in r.rows), min(x.start for x in r.rows),
                   max(x.end for x in r.rows), r.total_tokens, r.latency_summary()["mean"]]
    else:
        summary = ["summary", 0.0, 0.0, 0.0, 0, 0.0]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in rows + [summary]:
            w.writerow([_fmt(x) for x in row])


def read_csv(path) -> tuple[list[RequestRow], list[str]]:
    """Inverse of :func:`emit_csv`; returns the request rows and the raw summary row."""
    with open(path, newline="") as f:
        records = list(csv.reader(f))
    if not records or records[0] != CSV_HEADER:
        raise ValueError(f"{path} is not a bench CSV")
    rows = [RequestRow(int(a), float(b), float(c), float(d), int(e)) for a, b, c, d, e, _ in records[1:-1]]
    return rows, records[-1]


def run_live(model, cloud_tokens: Sequence[int], edge_prompts: Sequence[Sequence[int]], decode_steps: int) -> BenchResult:
    """Drive real loopback sessions against an in-process cloud; wall-clock timings."""
    from .kv_sync import CloudServer, EdgeClient

    rows = []
    with CloudServer(model, {0: list(cloud_tokens)}) as server:
        t0 = time.perf_counter()
        for i, prompt in enumerate(edge_prompts):
            arr = time.perf_counter() - t0
            sess = EdgeClient(model, server.address, prompt_id=0, session_id=i + 1).run(prompt, decode_steps)
            rows.append(RequestRow(i, arr, sess.start - t0, sess.end - t0, len(sess.tokens)))
    return BenchResult(rows)


def save_cost_model(cm: CostModel, path) -> None:
    Path(path).write_text(json.dumps(asdict(cm), indent=2) + "\n")
