"""Binary framing for cloud-to-edge KV streaming.

Every frame is a 10-byte header followed by the payload::

    magic  b"EPKV"       4 bytes
    version 0x01         1 byte
    msg_type             1 byte
    payload_len          u32 little-endian

All integers are little-endian. KV data is row-major float64, K first then V,
each ``seq_len x (n_heads * d_head)`` values.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"EPKV"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = HEADER.size  # 10
MAX_PAYLOAD = 1 << 30

ACK_END_OF_PREFILL = 0xFFFF


class MsgType(enum.IntEnum):
    SESSION_INIT = 0
    ACK = 1
    KV_FRAME = 2
    END_OF_PREFILL = 3
    ERROR = 4


class ErrorCode(enum.IntEnum):
    UNKNOWN_PROMPT = 1
    FINGERPRINT_MISMATCH = 2
    PROTOCOL = 3
    POSITION_OVERFLOW = 4
    INTERNAL = 5


class FrameError(ValueError):
    pass


class TruncatedFrame(FrameError):
    pass


@dataclass(frozen=True)
class SessionInit:
    session_id: int
    cloud_prompt_id: int
    model_fingerprint: bytes
    edge_prompt_len: int

    _fmt = struct.Struct("<II8sI")


@dataclass(frozen=True)
class Ack:
    session_id: int
    layer: int

    _fmt = struct.Struct("<IH")


@dataclass(frozen=True, eq=False)
class KVFrame:
    session_id: int
    layer: int
    seq_len: int
    n_heads: int
    d_head: int
    k: np.ndarray
    v: np.ndarray

    _fmt = struct.Struct("<IHIHH")

    def __eq__(self, other):
        if not isinstance(other, KVFrame):
            return NotImplemented
        return encode_frame(self) == encode_frame(other)

    @property
    def width(self) -> int:
        return self.n_heads * self.d_head

    def kv_elements(self) -> int:
        return 2 * self.seq_len * self.width


@dataclass(frozen=True)
class EndOfPrefill:
    pass


@dataclass(frozen=True)
class Error:
    session_id: int
    code: int
    message: str = ""

    _fmt = struct.Struct("<IH")


Message = Union[SessionInit, Ack, KVFrame, EndOfPrefill, Error]


def kv_payload_len(seq_len: int, n_heads: int, d_head: int) -> int:
    return KVFrame._fmt.size + 2 * 8 * seq_len * n_heads * d_head


def _payload(msg: Message) -> tuple[MsgType, bytes]:
    if isinstance(msg, SessionInit):
        if len(msg.model_fingerprint) != 8:
            raise FrameError("model fingerprint must be 8 bytes")
        return MsgType.SESSION_INIT, SessionInit._fmt.pack(
            msg.session_id, msg.cloud_prompt_id, msg.model_fingerprint, msg.edge_prompt_len
        )
    if isinstance(msg, Ack):
        return MsgType.ACK, Ack._fmt.pack(msg.session_id, msg.layer)
    if isinstance(msg, KVFrame):
        shape = (msg.seq_len, msg.width)
        k = np.ascontiguousarray(msg.k, dtype="<f8")
        v = np.ascontiguousarray(msg.v, dtype="<f8")
        if k.shape != shape or v.shape != shape:
            raise FrameError(f"KV data shapes {k.shape}, {v.shape} do not match header {shape}")
        head = KVFrame._fmt.pack(msg.session_id, msg.layer, msg.seq_len, msg.n_heads, msg.d_head)
        return MsgType.KV_FRAME, head + k.tobytes() + v.tobytes()
    if isinstance(msg, EndOfPrefill):
        return MsgType.END_OF_PREFILL, b""
    if isinstance(msg, Error):
        return MsgType.ERROR, Error._fmt.pack(msg.session_id, msg.code) + msg.message.encode()
    raise TypeError(f"not a protocol message: {msg!r}")


def encode_frame(msg: Message) -> bytes:
    mtype, payload = _payload(msg)
    return HEADER.pack(MAGIC, VERSION, mtype, len(payload)) + payload


def parse_header(header: bytes) -> tuple[MsgType, int]:
    if len(header) < HEADER_SIZE:
        raise TruncatedFrame(f"header needs {HEADER_SIZE} bytes, have {len(header)}")
    magic, version, mtype, length = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    if length > MAX_PAYLOAD:
        raise FrameError(f"payload length {length} exceeds limit {MAX_PAYLOAD}")
    try:
        return MsgType(mtype), length
    except ValueError:
        raise FrameError(f"unknown message type {mtype}") from None


def decode_payload(mtype: MsgType, payload: bytes) -> Message:
    def need(n):
        if len(payload) != n:
            raise FrameError(f"{mtype.name} payload must be {n} bytes, got {len(payload)}")

    if mtype is MsgType.SESSION_INIT:
        need(SessionInit._fmt.size)
        return SessionInit(*SessionInit._fmt.unpack(payload))
    if mtype is MsgType.ACK:
        need(Ack._fmt.size)
        return Ack(*Ack._fmt.unpack(payload))
    if mtype is MsgType.KV_FRAME:
        fmt = KVFrame._fmt
        if len(payload) < fmt.size:
            raise FrameError("KV frame payload shorter than its header")
        sid, layer, seq_len, n_heads, d_head = fmt.unpack_from(payload)
        need(kv_payload_len(seq_len, n_heads, d_head))
        n = seq_len * n_heads * d_head
        data = np.frombuffer(payload, dtype="<f8", offset=fmt.size).astype(np.float64)
        shape = (seq_len, n_heads * d_head)
        return KVFrame(sid, layer, seq_len, n_heads, d_head, data[:n].reshape(shape), data[n:].reshape(shape))
    if mtype is MsgType.END_OF_PREFILL:
        need(0)
        return EndOfPrefill()
    if mtype is MsgType.ERROR:
        fmt = Error._fmt
        if len(payload) < fmt.size:
            raise FrameError("error payload too short")
        sid, code = fmt.unpack_from(payload)
        return Error(sid, code, payload[fmt.size:].decode(errors="replace"))
    raise FrameError(f"unhandled message type {mtype}")


def decode_frame(buf: bytes) -> tuple[Message, int]:
    """Decode the first frame in ``buf``; returns the message and bytes consumed."""
    mtype, length = parse_header(buf)
    end = HEADER_SIZE + length
    if len(buf) < end:
        raise TruncatedFrame(f"frame needs {end} bytes, buffer has {len(buf)}")
    return decode_payload(mtype, bytes(buf[HEADER_SIZE:end])), end


def decode_stream(buf: bytes) -> list[Message]:
    out, pos = [], 0
    while pos < len(buf):
        msg, used = decode_frame(buf[pos:])
        out.append(msg)
        pos += used
    return out


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise TruncatedFrame(f"stream closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> Message:
    """Read exactly one frame from a blocking binary stream."""
    mtype, length = parse_header(_read_exact(stream, HEADER_SIZE))
    return decode_payload(mtype, _read_exact(stream, length))
