"""Cloud side: computes the cloud prompt's per-layer KV and streams it.

KV for a prompt id is cached after its first computation; later sessions for
the same id are served from the cache without running the model.
"""

from __future__ import annotations

import hashlib
import logging
import queue
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from ..model import KVSegment, Model, Origin, embed, transformer_layer
from .transport import Connection
from .wire import (
    ACK_END_OF_PREFILL,
    Ack,
    EndOfPrefill,
    Error,
    ErrorCode,
    FrameError,
    KVFrame,
    SessionInit,
    encode_frame,
)

log = logging.getLogger(__name__)

LinkDelay = Callable[[int], float]


@dataclass
class CloudLayerTiming:
    layer: int
    compute_start: float
    compute_end: float
    send_start: float = 0.0
    send_end: float = 0.0


@dataclass
class SessionRecord:
    session_id: int = -1
    prompt_id: int = -1
    cache_hit: bool = False
    error: int | None = None
    start: float = 0.0
    end: float = 0.0
    layers: list[CloudLayerTiming] = field(default_factory=list)
    kv_digest: str = ""
    acks: list[int] = field(default_factory=list)

    @property
    def completed(self) -> bool:
        return self.error is None and ACK_END_OF_PREFILL in self.acks


def kv_frames(model: Model, session_id: int, segments: Sequence[KVSegment]) -> list[KVFrame]:
    cfg = model.config
    return [
        KVFrame(session_id, seg.layer, seg.seq_len, cfg.n_heads, cfg.d_head, seg.k, seg.v)
        for seg in segments
    ]


class CloudService:
    """Session logic independent of the socket server, so tests can drive it."""

    def __init__(self, model: Model, prompts: Mapping[int, Sequence[int]], link_delay: LinkDelay | None = None):
        self.model = model
        self.prompts = {int(k): list(v) for k, v in prompts.items()}
        self.link_delay = link_delay
        self.sessions: list[SessionRecord] = []
        self._kv_cache: dict[int, list[KVSegment]] = {}
        self._prompt_locks: dict[int, threading.Lock] = {}
        self._lock = threading.Lock()
        self._finished = threading.Condition(self._lock)
        self._n_finished = 0

    def wait_for_sessions(self, n: int, timeout: float = 10.0) -> bool:
        """Block until ``n`` sessions have fully ended on the server side."""
        with self._finished:
            return self._finished.wait_for(lambda: self._n_finished >= n, timeout)

    def cached_prompt_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._kv_cache)

    def _prompt_lock(self, prompt_id: int) -> threading.Lock:
        with self._lock:
            return self._prompt_locks.setdefault(prompt_id, threading.Lock())

    def _fail(self, conn: Connection, rec: SessionRecord, code: ErrorCode, message: str) -> None:
        rec.error = int(code)
        log.info("session %d rejected: %s", rec.session_id, message)
        try:
            conn.send(Error(max(rec.session_id, 0), code, message))
        except OSError:
            pass

    def handle(self, conn: Connection) -> SessionRecord:
        rec = SessionRecord(start=time.perf_counter())
        with self._lock:
            self.sessions.append(rec)
        try:
            self._handle(conn, rec)
        except (OSError, FrameError) as exc:
            log.info("session %d aborted: %s", rec.session_id, exc)
            if rec.error is None:
                rec.error = int(ErrorCode.PROTOCOL)
        finally:
            rec.end = time.perf_counter()
            conn.close()
            with self._finished:
                self._n_finished += 1
                self._finished.notify_all()
        return rec

    def _handle(self, conn: Connection, rec: SessionRecord) -> None:
        try:
            init = conn.recv()
        except FrameError as exc:
            return self._fail(conn, rec, ErrorCode.PROTOCOL, str(exc))
        if not isinstance(init, SessionInit):
            return self._fail(conn, rec, ErrorCode.PROTOCOL, f"expected SessionInit, got {type(init).__name__}")
        rec.session_id, rec.prompt_id = init.session_id, init.cloud_prompt_id

        if init.model_fingerprint != self.model.fingerprint():
            return self._fail(conn, rec, ErrorCode.FINGERPRINT_MISMATCH, "model fingerprint mismatch")
        tokens = self.prompts.get(init.cloud_prompt_id)
        if tokens is None:
            return self._fail(conn, rec, ErrorCode.UNKNOWN_PROMPT, f"unknown prompt id {init.cloud_prompt_id}")
        if len(tokens) + init.edge_prompt_len > self.model.config.max_positions:
            return self._fail(conn, rec, ErrorCode.POSITION_OVERFLOW, "prompt exceeds max_positions")

        digest = hashlib.blake2b(digest_size=16)
        outbox: queue.Queue = queue.Queue()
        sender = threading.Thread(target=self._send_loop, args=(conn, outbox, rec, digest), daemon=True)
        sender.start()
        try:
            self._produce(init, tokens, rec, outbox)
        finally:
            outbox.put(None)
            sender.join()
        rec.kv_digest = digest.hexdigest()
        if rec.error is not None:
            return

        while True:
            try:
                msg = conn.recv()
            except (OSError, FrameError):
                break
            if not isinstance(msg, Ack) or msg.session_id != rec.session_id:
                return self._fail(conn, rec, ErrorCode.PROTOCOL, "only acknowledgments are accepted after SessionInit")
            rec.acks.append(msg.layer)
            if msg.layer == ACK_END_OF_PREFILL:
                break

    def _produce(self, init: SessionInit, tokens: list[int], rec: SessionRecord, outbox: queue.Queue) -> None:
        sid = init.session_id
        with self._prompt_lock(init.cloud_prompt_id):
            cached = self._kv_cache.get(init.cloud_prompt_id)
            rec.cache_hit = cached is not None
            if cached is not None:
                for seg in cached:
                    now = time.perf_counter()
                    timing = CloudLayerTiming(seg.layer, now, now)
                    rec.layers.append(timing)
                    outbox.put((timing, kv_frames(self.model, sid, [seg])[0]))
            else:
                segments = []
                t0 = time.perf_counter()
                hidden = embed(self.model, tokens, 0)
                for layer in range(self.model.config.n_layers):
                    hidden, k, v = transformer_layer(self.model, layer, hidden, [], 0)
                    seg = KVSegment(layer, Origin.CLOUD, 0, k, v)
                    segments.append(seg)
                    t1 = time.perf_counter()
                    timing = CloudLayerTiming(layer, t0, t1)
                    rec.layers.append(timing)
                    outbox.put((timing, kv_frames(self.model, sid, [seg])[0]))
                    t0 = t1
                self._kv_cache[init.cloud_prompt_id] = segments
        outbox.put((None, EndOfPrefill()))

    def _send_loop(self, conn: Connection, outbox: queue.Queue, rec: SessionRecord, digest) -> None:
        failed = False
        while True:
            item = outbox.get()
            if item is None:
                return
            if failed:
                continue
            timing, msg = item
            data = encode_frame(msg)
            try:
                if timing is not None and self.link_delay is not None:
                    time.sleep(self.link_delay(timing.layer))
                if timing is not None:
                    timing.send_start = time.perf_counter()
                    digest.update(data)
                conn.send_raw(data)
                if timing is not None:
                    timing.send_end = time.perf_counter()
            except OSError as exc:
                log.info("session %d send failed: %s", rec.session_id, exc)
                rec.error = int(ErrorCode.PROTOCOL)
                failed = True


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        self.server.service.handle(Connection(self.request))


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class CloudServer:
    """Threaded TCP front end for :class:`CloudService`."""

    def __init__(
        self,
        model: Model,
        prompts: Mapping[int, Sequence[int]],
        host: str = "127.0.0.1",
        port: int = 0,
        link_delay: LinkDelay | None = None,
    ):
        self.service = CloudService(model, prompts, link_delay)
        self._server = _TCPServer((host, port), _Handler)
        self._server.service = self.service
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def sessions(self) -> list[SessionRecord]:
        return self.service.sessions

    def start(self) -> "CloudServer":
        self._thread = threading.Thread(target=self._server.serve_forever, args=(0.05,), daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def close(self) -> None:
        self._server.server_close()

    def stop(self) -> None:
        self._server.shutdown()
        self.close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def cloud_serve(model: Model, listen_endpoint: tuple[str, int], prompt_store: Mapping[int, Sequence[int]]) -> None:
    """Serve until interrupted."""
    server = CloudServer(model, prompt_store, *listen_endpoint)
    log.info("cloud listening on %s:%d", *server.address)
    try:
        server.serve_forever()
    finally:
        server.close()
