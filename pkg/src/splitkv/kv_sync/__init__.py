"""Cloud/edge roles and the KV streaming protocol."""

from .audit import AuditReport, Violation, kv_sentinels, plant_sentinels, privacy_audit
from .cloud import CloudServer, CloudService, SessionRecord, cloud_serve
from .edge import CloudError, EdgeClient, EdgeSession, ProtocolError, SessionAborted, edge_run
from .transport import Connection, WireCapture
from .wire import (
    Ack,
    EndOfPrefill,
    Error,
    ErrorCode,
    FrameError,
    KVFrame,
    MsgType,
    SessionInit,
    decode_frame,
    encode_frame,
)
