"""Edge side: receives cloud KV layer by layer and prefills the edge prompt.

Edge layer ``l`` runs once layer ``l``'s KV frame has arrived and edge layer
``l-1`` is done. In pipelined mode a receiver thread keeps reading frames
while the edge computes; sequential mode reads and computes in one thread.
Both perform the same arithmetic in the same order, so their tokens match.

Only the edge prompt length crosses the wire. Edge tokens, edge KV and
generated KV stay in this process.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

from ..model import KVSegment, Model, Origin, SegmentedCache, embed, rollout, transformer_layer
from .transport import Connection, WireCapture
from .wire import ACK_END_OF_PREFILL, Ack, EndOfPrefill, Error, FrameError, KVFrame, Message, SessionInit


class ProtocolError(RuntimeError):
    pass


class CloudError(RuntimeError):
    def __init__(self, code: int, message: str):
        super().__init__(f"cloud error {code}: {message}")
        self.code = code
        self.message = message


class SessionAborted(RuntimeError):
    def __init__(self, reason: str, resumable: bool = False):
        super().__init__(reason)
        self.resumable = resumable


@dataclass
class EdgeLayerTiming:
    layer: int
    arrival: float
    compute_start: float = 0.0
    compute_end: float = 0.0


@dataclass
class EdgeSession:
    session_id: int
    prompt_id: int
    start: float = 0.0
    prefill_end: float = 0.0
    end: float = 0.0
    cloud_len: int = 0
    layers: list[EdgeLayerTiming] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    cache: SegmentedCache | None = None


class EdgeClient:
    def __init__(
        self,
        model: Model,
        cloud_endpoint: tuple[str, int],
        *,
        prompt_id: int = 0,
        session_id: int = 1,
        pipelined: bool = True,
        capture: WireCapture | None = None,
        timeout: float = 30.0,
    ):
        self.model = model
        self.endpoint = cloud_endpoint
        self.prompt_id = prompt_id
        self.session_id = session_id
        self.pipelined = pipelined
        self.capture = capture
        self.timeout = timeout

    def open_session(self, conn: Connection, edge_tokens: Sequence[int]) -> None:
        conn.send(SessionInit(self.session_id, self.prompt_id, self.model.fingerprint(), len(edge_tokens)))

    def run(self, edge_tokens: Sequence[int], n_decode_steps: int) -> EdgeSession:
        edge_tokens = list(edge_tokens)
        if not edge_tokens:
            raise ValueError("edge prompt must not be empty")
        sess = EdgeSession(self.session_id, self.prompt_id, start=time.perf_counter())
        try:
            conn = Connection.connect(self.endpoint, self.capture, self.timeout)
        except OSError as exc:
            raise SessionAborted(f"cannot reach cloud at {self.endpoint}: {exc}") from exc
        try:
            try:
                self.open_session(conn, edge_tokens)
            except OSError as exc:
                raise SessionAborted(f"transport failure: {exc}", resumable=False) from exc
            frames = self._threaded_frames(conn) if self.pipelined else self._frames(conn)
            hidden, cache = self._prefill(sess, edge_tokens, frames)
        finally:
            conn.close()
        sess.prefill_end = time.perf_counter()
        sess.cache = cache
        sess.tokens = rollout(self.model, cache, hidden, n_decode_steps)
        sess.end = time.perf_counter()
        return sess

    def _next(self, conn: Connection) -> Message:
        try:
            msg = conn.recv()
            if isinstance(msg, KVFrame):
                conn.send(Ack(self.session_id, msg.layer))
            elif isinstance(msg, EndOfPrefill):
                conn.send(Ack(self.session_id, ACK_END_OF_PREFILL))
        except (OSError, FrameError) as exc:
            raise SessionAborted(f"transport failure: {exc}", resumable=False) from exc
        if isinstance(msg, Error):
            raise CloudError(msg.code, msg.message)
        return msg

    def _frames(self, conn: Connection):
        while True:
            msg = self._next(conn)
            yield msg, time.perf_counter()
            if isinstance(msg, EndOfPrefill):
                return

    def _threaded_frames(self, conn: Connection):
        inbox: queue.Queue = queue.Queue()

        def pump():
            try:
                for item in self._frames(conn):
                    inbox.put(item)
            except BaseException as exc:  # handed to the consumer
                inbox.put(exc)

        threading.Thread(target=pump, daemon=True).start()
        while True:
            item = inbox.get()
            if isinstance(item, BaseException):
                raise item
            yield item
            if isinstance(item[0], EndOfPrefill):
                return

    def _prefill(self, sess: EdgeSession, edge_tokens: list[int], frames):
        cfg = self.model.config
        cache = SegmentedCache(cfg.n_layers)
        cloud, edge = [], []
        hidden = None
        for layer in range(cfg.n_layers + 1):
            msg, arrival = next(frames)
            if layer == cfg.n_layers:
                if not isinstance(msg, EndOfPrefill):
                    raise ProtocolError(f"expected EndOfPrefill after {cfg.n_layers} layers, got {type(msg).__name__}")
                break
            if not isinstance(msg, KVFrame):
                raise ProtocolError(f"expected KV frame for layer {layer}, got {type(msg).__name__}")
            self._check_frame(msg, layer, sess)
            if layer == 0:
                sess.cloud_len = msg.seq_len
                hidden = embed(self.model, edge_tokens, sess.cloud_len)
            timing = EdgeLayerTiming(layer, arrival, time.perf_counter())
            seg = KVSegment(layer, Origin.CLOUD, 0, msg.k, msg.v)
            hidden, k, v = transformer_layer(self.model, layer, hidden, [seg], sess.cloud_len)
            timing.compute_end = time.perf_counter()
            sess.layers.append(timing)
            cloud.append(seg)
            edge.append(KVSegment(layer, Origin.EDGE, sess.cloud_len, k, v))
        cache.append(cloud)
        cache.append(edge)
        return hidden, cache

    def _check_frame(self, f: KVFrame, layer: int, sess: EdgeSession) -> None:
        cfg = self.model.config
        if f.layer != layer:
            raise ProtocolError(f"layer {f.layer} arrived while expecting layer {layer}")
        if f.session_id != self.session_id:
            raise ProtocolError(f"frame for session {f.session_id}, this is session {self.session_id}")
        if (f.n_heads, f.d_head) != (cfg.n_heads, cfg.d_head):
            raise ProtocolError(f"frame shape H={f.n_heads} d={f.d_head} does not match the model")
        if layer > 0 and f.seq_len != sess.cloud_len:
            raise ProtocolError(f"layer {layer} has {f.seq_len} positions, layer 0 had {sess.cloud_len}")
        if f.seq_len == 0:
            raise ProtocolError("empty cloud prompt")


def edge_run(
    model: Model,
    cloud_endpoint: tuple[str, int],
    edge_tokens: Sequence[int],
    n_decode_steps: int,
    **kwargs,
) -> list[int]:
    return EdgeClient(model, cloud_endpoint, **kwargs).run(edge_tokens, n_decode_steps).tokens

