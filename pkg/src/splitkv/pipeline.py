"""Timing model of the overlapped cloud/link/edge prefill pipeline.

Per layer ``l`` (0-based here; formulas below use 1-based indices):

* ``t_cc[l]``  cloud computes the cloud prompt's KV for layer l
* ``t_ct[l]``  that KV crosses the cloud-to-edge link
* ``t_ec[l]``  the edge runs layer l over the edge prompt

``closed_form_total`` is the overlapped makespan::

    t_prefix + (t_cc1 + t_ct1)
             + max(sum_{l=2..L}(t_cc + t_ct), sum_{l=1..L-1} t_ec) + t_ecL

``simulate`` executes the same dependency graph event by event. Two cloud
disciplines are supported. With ``cloud_overlap=False`` (default) the cloud
worker computes a layer and ships it before starting the next one; this is
the schedule the closed form describes exactly for layer-constant profiles.
With ``cloud_overlap=True`` the cloud computes layer l+1 while layer l is on
the link; the regime objectives (P1 link-bound, P2/P3 edge-bound) are exact
makespans under that discipline.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

DEFAULT_EPS = 1e-6
ACTORS = ("cloud", "link", "edge")


@dataclass
class TimingProfile:
    t_cc: list[float]
    t_ct: list[float]
    t_ec: list[float]
    t_prefix: float = 0.0

    def __post_init__(self):
        self.t_cc = [float(x) for x in self.t_cc]
        self.t_ct = [float(x) for x in self.t_ct]
        self.t_ec = [float(x) for x in self.t_ec]
        self.t_prefix = float(self.t_prefix)
        L = len(self.t_cc)
        if L < 1:
            raise ValueError("a profile needs at least one layer")
        if len(self.t_ct) != L or len(self.t_ec) != L:
            raise ValueError(f"per-layer vectors differ in length: {L}, {len(self.t_ct)}, {len(self.t_ec)}")
        for name, vals in (("t_cc", self.t_cc), ("t_ct", self.t_ct), ("t_ec", self.t_ec), ("t_prefix", [self.t_prefix])):
            if any(not math.isfinite(x) or x < 0 for x in vals):
                raise ValueError(f"{name} must be finite and non-negative")

    @property
    def n_layers(self) -> int:
        return len(self.t_cc)

    @classmethod
    def constant(cls, n_layers: int, t_cc: float, t_ct: float, t_ec: float, t_prefix: float = 0.0) -> "TimingProfile":
        return cls([t_cc] * n_layers, [t_ct] * n_layers, [t_ec] * n_layers, t_prefix)

    def means(self) -> tuple[float, float, float]:
        L = self.n_layers
        return sum(self.t_cc) / L, sum(self.t_ct) / L, sum(self.t_ec) / L

    def to_dict(self) -> dict:
        return {"n_layers": self.n_layers, "t_prefix": self.t_prefix,
                "t_cc": self.t_cc, "t_ct": self.t_ct, "t_ec": self.t_ec}

    @classmethod
    def from_dict(cls, d: dict) -> "TimingProfile":
        """Accepts per-layer lists or scalars (scalars need ``n_layers``)."""
        L = d.get("n_layers")

        def vec(key):
            val = d[key]
            if isinstance(val, (int, float)):
                if L is None:
                    raise ValueError(f"scalar {key} needs n_layers")
                return [val] * int(L)
            return list(val)

        prof = cls(vec("t_cc"), vec("t_ct"), vec("t_ec"), d.get("t_prefix", 0.0))
        if L is not None and prof.n_layers != int(L):
            raise ValueError(f"n_layers={L} but vectors have {prof.n_layers} entries")
        return prof

    @classmethod
    def load(cls, path) -> "TimingProfile":
        with open(path) as f:
            return cls.from_dict(json.load(f))


class Regime(enum.Enum):
    P1_COMM_BOUND = "P1_comm_bound"
    P2_EDGE_COMPUTE_BOUND = "P2_edge_compute_bound"
    P3_CLOUD_COMPUTE_BOUND = "P3_cloud_compute_bound"
    UNCLASSIFIED = "Unclassified"


@dataclass(frozen=True)
class Event:
    actor: str
    layer: int
    start: float
    end: float


@dataclass
class PipelineTrace:
    events: list[Event]
    total: float

    def of(self, actor: str) -> list[Event]:
        return [e for e in self.events if e.actor == actor]

    def idle_gaps(self, actor: str) -> list[tuple[float, float]]:
        evs = self.of(actor)
        return [(a.end, b.start) for a, b in zip(evs, evs[1:]) if b.start > a.end]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["actor", "layer", "start", "end"])
        for e in self.events:
            w.writerow([e.actor, e.layer, repr(e.start), repr(e.end)])
        return buf.getvalue()


def kv_size(n_heads: int, d: int, seq_len: int) -> int:
    """KV element count per layer: 2 x heads x dim x sequence length."""
    for name, v in (("H", n_heads), ("D", d), ("S", seq_len)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    return 2 * n_heads * d * seq_len


def t_cloud(p: TimingProfile) -> float:
    return (p.t_cc[0] + p.t_ct[0]) + sum(p.t_cc[l] + p.t_ct[l] for l in range(1, p.n_layers))


def t_edge(p: TimingProfile) -> float:
    return (p.t_cc[0] + p.t_ct[0]) + sum(p.t_ec)


def closed_form_total(p: TimingProfile) -> float:
    L = p.n_layers
    link_chain = sum(p.t_cc[l] + p.t_ct[l] for l in range(1, L))
    edge_chain = sum(p.t_ec[: L - 1])
    return p.t_prefix + (p.t_cc[0] + p.t_ct[0]) + max(link_chain, edge_chain) + p.t_ec[L - 1]


def simulate(p: TimingProfile, cloud_overlap: bool = False) -> PipelineTrace:
    """Discrete-event execution of the layer pipeline.

    Each actor runs its layers in order, one at a time. Dependencies: link l
    after cloud l; edge l after link l; without ``cloud_overlap`` also cloud
    l after link l-1. Everything starts at ``t_prefix``. Simultaneous events
    are ordered by layer, then cloud, link, edge.
    """
    L = p.n_layers
    dur = {"cloud": p.t_cc, "link": p.t_ct, "edge": p.t_ec}
    rank = {a: i for i, a in enumerate(ACTORS)}
    done: dict[tuple[str, int], float] = {}
    next_layer = {a: 0 for a in ACTORS}
    busy = {a: False for a in ACTORS}
    events: list[Event] = []
    heap: list[tuple[float, int, int, str]] = []

    def ready(actor: str, layer: int) -> bool:
        if actor == "cloud":
            return cloud_overlap or layer == 0 or ("link", layer - 1) in done
        if actor == "link":
            return ("cloud", layer) in done
        return ("link", layer) in done

    def dispatch(now: float) -> None:
        for actor in ACTORS:
            layer = next_layer[actor]
            if busy[actor] or layer >= L or not ready(actor, layer):
                continue
            end = now + dur[actor][layer]
            busy[actor] = True
            next_layer[actor] += 1
            events.append(Event(actor, layer, now, end))
            heapq.heappush(heap, (end, layer, rank[actor], actor))

    now = p.t_prefix
    dispatch(now)
    while heap:
        now = heap[0][0]
        while heap and heap[0][0] == now:
            _, layer, _, actor = heapq.heappop(heap)
            done[(actor, layer)] = now
            busy[actor] = False
        dispatch(now)

    events.sort(key=lambda e: (e.start, e.layer, rank[e.actor]))
    return PipelineTrace(events, done[("edge", L - 1)])


def _spread(xs: Sequence[float]) -> float:
    return max(xs) - min(xs)


def is_layer_constant(p: TimingProfile, eps: float = DEFAULT_EPS) -> bool:
    return all(_spread(v) <= eps for v in (p.t_cc, p.t_ct, p.t_ec))


def classify_regime(p: TimingProfile, eps: float = DEFAULT_EPS) -> Regime:
    if not is_layer_constant(p, eps):
        return Regime.UNCLASSIFIED
    cc, ct, ec = p.means()
    if ec < ct - eps:
        return Regime.P1_COMM_BOUND
    if cc + eps < ct and ct + eps < ec:
        return Regime.P2_EDGE_COMPUTE_BOUND
    if ct + eps < cc and cc + eps < ec:
        return Regime.P3_CLOUD_COMPUTE_BOUND
    return Regime.UNCLASSIFIED


def objective_value(r: Regime, p: TimingProfile) -> float:
    """Makespan term each regime minimizes: link chain (P1) or edge chain (P2, P3)."""
    head = p.t_prefix + p.t_cc[0] + p.t_ct[0]
    if r is Regime.P1_COMM_BOUND:
        return head + sum(p.t_ct[1:]) + p.t_ec[-1]
    if r in (Regime.P2_EDGE_COMPUTE_BOUND, Regime.P3_CLOUD_COMPUTE_BOUND):
        return head + sum(p.t_ec)
    raise ValueError("no objective for an unclassified profile")


@dataclass
class AssumptionReport:
    a1_cloud_faster: bool
    a2_stable_layers: bool
    c1_cloud_compute_shorter: bool
    c2_chain_ordering: bool
    details: dict = field(default_factory=dict)

    @property
    def all_pass(self) -> bool:
        return all((self.a1_cloud_faster, self.a2_stable_layers,
                    self.c1_cloud_compute_shorter, self.c2_chain_ordering))

    def lines(self) -> list[str]:
        def mark(ok):
            return "pass" if ok else "FAIL"

        return [
            f"A1 cloud FLOPS >= edge FLOPS: {mark(self.a1_cloud_faster)}",
            f"A2 stable t_ct and t_ec across layers: {mark(self.a2_stable_layers)}",
            f"C1 t_cc < t_ec on every layer: {mark(self.c1_cloud_compute_shorter)}",
            f"C2 t_ct[l] + t_cc[l] < t_ct[l-1] + t_ec[l] for l >= 2: {mark(self.c2_chain_ordering)}",
        ]


def validate_assumptions(p: TimingProfile, f_cloud: float, f_edge: float, eps: float = DEFAULT_EPS) -> AssumptionReport:
    L = p.n_layers
    c1_bad = [l for l in range(L) if not p.t_cc[l] < p.t_ec[l]]
    c2_bad = [l for l in range(1, L) if not p.t_ct[l] + p.t_cc[l] < p.t_ct[l - 1] + p.t_ec[l]]
    return AssumptionReport(
        a1_cloud_faster=f_cloud >= f_edge,
        a2_stable_layers=_spread(p.t_ct) <= eps and _spread(p.t_ec) <= eps,
        c1_cloud_compute_shorter=not c1_bad,
        c2_chain_ordering=not c2_bad,
        details={"t_ct_spread": _spread(p.t_ct), "t_ec_spread": _spread(p.t_ec),
                 "c1_failing_layers": c1_bad, "c2_failing_layers": c2_bad},
    )


def profile_from_flops(
    workload: Sequence[float], f_cloud: float, f_edge: float, t_ct: Sequence[float], t_prefix: float = 0.0
) -> TimingProfile:
    """Per-layer compute times from a per-layer operation count and device speeds."""
    return TimingProfile([c / f_cloud for c in workload], list(t_ct), [c / f_edge for c in workload], t_prefix)


def profile_from_session(cloud_record, edge_session) -> TimingProfile:
    """Recover a profile from one instrumented cloud/edge session.

    Both logs must come from the same monotonic clock. Link time for layer l
    runs from the moment its KV was ready and the link was free (previous
    frame delivered) until the frame's arrival at the edge.
    """
    cloud = sorted(cloud_record.layers, key=lambda t: t.layer)
    edge = sorted(edge_session.layers, key=lambda t: t.layer)
    if not cloud or not edge:
        raise ValueError("session trace has no layer timings")
    if len(cloud) != len(edge) or [c.layer for c in cloud] != list(range(len(cloud))):
        raise ValueError(f"incomplete trace: {len(cloud)} cloud layers, {len(edge)} edge layers")
    t_cc, t_ct, t_ec = [], [], []
    prev_arrival = -math.inf
    for c, e in zip(cloud, edge):
        t_cc.append(max(c.compute_end - c.compute_start, 0.0))
        t_ct.append(max(e.arrival - max(c.compute_end, prev_arrival), 0.0))
        t_ec.append(max(e.compute_end - e.compute_start, 0.0))
        prev_arrival = e.arrival
    t_prefix = max(cloud[0].compute_start - edge_session.start, 0.0)
    return TimingProfile(t_cc, t_ct, t_ec, t_prefix)


def sub_resolution(p: TimingProfile, resolution: float = 1e-4) -> list[tuple[str, int, float]]:
    """Entries too small to be trusted at the given timer/scheduler resolution."""
    out = []
    for name in ("t_cc", "t_ct", "t_ec"):
        for l, v in enumerate(getattr(p, name)):
            if v < resolution:
                out.append((name, l, v))
    return out
