from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .wire import Message, encode_frame, read_frame

CAPTURE_MAGIC = b"EPCAP001"


class ConnectionClosed(ConnectionError):
    pass


@dataclass
class WireCapture:
    """Raw bytes seen by one endpoint, split by direction."""

    sent: bytearray = field(default_factory=bytearray)
    received: bytearray = field(default_factory=bytearray)

    def __post_init__(self):
        self._lock = threading.Lock()

    def record(self, direction: str, data: bytes) -> None:
        with self._lock:
            getattr(self, direction).extend(data)

    def directions(self) -> dict[str, bytes]:
        return {"sent": bytes(self.sent), "received": bytes(self.received)}

    def __len__(self) -> int:
        return len(self.sent) + len(self.received)

    def to_bytes(self) -> bytes:
        return b"".join(
            [CAPTURE_MAGIC, struct.pack("<Q", len(self.sent)), bytes(self.sent),
             struct.pack("<Q", len(self.received)), bytes(self.received)]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "WireCapture":
        if data[:8] != CAPTURE_MAGIC:
            raise ValueError("not a wire capture file")
        pos = 8
        (n,) = struct.unpack_from("<Q", data, pos)
        sent = data[pos + 8:pos + 8 + n]
        pos += 8 + n
        (m,) = struct.unpack_from("<Q", data, pos)
        received = data[pos + 8:pos + 8 + m]
        return cls(bytearray(sent), bytearray(received))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WireCapture":
        return cls.from_bytes(Path(path).read_bytes())


class Connection:
    """Framed messages over a connected stream socket, optionally captured."""

    def __init__(self, sock: socket.socket, capture: WireCapture | None = None):
        self.sock = sock
        self.capture = capture
        self._send_lock = threading.Lock()

    @classmethod
    def connect(cls, endpoint: tuple[str, int], capture=None, timeout: float | None = 30.0) -> "Connection":
        sock = socket.create_connection(endpoint, timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock, capture)

    def send_raw(self, data: bytes) -> None:
        with self._send_lock:
            self.sock.sendall(data)
            if self.capture is not None:
                self.capture.record("sent", data)

    def send(self, msg: Message) -> bytes:
        data = encode_frame(msg)
        self.send_raw(data)
        return data

    def read(self, n: int) -> bytes:
        data = self.sock.recv(n)
        if data and self.capture is not None:
            self.capture.record("received", data)
        return data

    def recv(self) -> Message:
        return read_frame(self)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)
