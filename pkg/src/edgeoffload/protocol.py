"""Length-prefixed message framing between clients, workers and the server.

A frame is a 4-byte big-endian unsigned length followed by that many bytes
of UTF-8 JSON::

    {"v": 1, "type": "HEARTBEAT", "id": "...", "ts_ms": 1700000000000, "payload": {...}}

Binary data (images, checkpoint blobs) travels base64-encoded inside the
payload. Responses reuse the id of the request they answer.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import json
import math
import struct
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .errors import FramingError, OversizeError, ParseError, ProtocolError

VERSION = 1
HEADER = struct.Struct(">I")
HEADER_SIZE = HEADER.size
MAX_FRAME_BYTES = 16 * 1024 * 1024
DEFAULT_TIMEOUT_S = 10.0


class MessageType(str, Enum):
    REGISTER = "REGISTER"
    REGISTER_ACK = "REGISTER_ACK"
    HEARTBEAT = "HEARTBEAT"
    HEARTBEAT_ACK = "HEARTBEAT_ACK"
    SUBMIT_JOB = "SUBMIT_JOB"
    JOB_STATUS = "JOB_STATUS"
    DISPATCH = "DISPATCH"
    PREEMPT = "PREEMPT"
    CHECKPOINT_DONE = "CHECKPOINT_DONE"
    RESUME = "RESUME"
    OFFLOAD_REQUEST = "OFFLOAD_REQUEST"
    OFFLOAD_RESPONSE = "OFFLOAD_RESPONSE"
    ERROR = "ERROR"


# payload keys each message type must carry
REQUIRED_FIELDS = {
    MessageType.REGISTER: ("worker",),
    MessageType.REGISTER_ACK: ("worker_id",),
    MessageType.HEARTBEAT: ("worker_id",),
    MessageType.HEARTBEAT_ACK: ("worker_id",),
    MessageType.SUBMIT_JOB: ("job",),
    MessageType.JOB_STATUS: (),
    MessageType.DISPATCH: ("job_id", "job"),
    MessageType.PREEMPT: ("job_id",),
    MessageType.CHECKPOINT_DONE: ("job_id",),
    MessageType.RESUME: ("job_id", "job"),
    MessageType.OFFLOAD_REQUEST: ("model_name", "data_b64"),
    MessageType.OFFLOAD_RESPONSE: ("model_name",),
    MessageType.ERROR: ("code", "message"),
}


def now_ms() -> int:
    return int(time.time() * 1000)


def new_id() -> str:
    return uuid.uuid4().hex


@dataclass(frozen=True)
class Message:
    type: MessageType
    payload: dict = field(default_factory=dict)
    id: str = field(default_factory=new_id)
    ts_ms: int = field(default_factory=now_ms)

    def __post_init__(self):
        object.__setattr__(self, "type", _message_type(self.type))

    def reply(self, type: MessageType, payload: Optional[dict] = None) -> "Message":
        return Message(type, payload or {}, id=self.id)

    def error(self, code: str, message: str) -> "Message":
        return self.reply(MessageType.ERROR, {"code": code, "message": message})


def _message_type(value) -> MessageType:
    try:
        return MessageType(value)
    except ValueError:
        raise ProtocolError(f"unknown message type {value!r}") from None


def _check_json_value(value, path: str) -> None:
    if value is None or isinstance(value, (str, bool, int)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ProtocolError(f"{path}: non-finite number")
        return
    if isinstance(value, list):
        for i, v in enumerate(value):
            _check_json_value(v, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise ProtocolError(f"{path}: non-string key {k!r}")
            _check_json_value(v, f"{path}.{k}")
        return
    raise ProtocolError(f"{path}: unsupported value of type {type(value).__name__}")


def validate(msg: Message) -> None:
    if not isinstance(msg.id, str) or not msg.id:
        raise ProtocolError("id must be a non-empty string")
    if not isinstance(msg.ts_ms, int) or isinstance(msg.ts_ms, bool):
        raise ProtocolError("ts_ms must be an integer")
    if not isinstance(msg.payload, dict):
        raise ProtocolError("payload must be an object")
    missing = [k for k in REQUIRED_FIELDS[msg.type] if k not in msg.payload]
    if missing:
        raise ProtocolError(f"{msg.type.value} payload missing {', '.join(missing)}")
    _check_json_value(msg.payload, "payload")


def encode_body(msg: Message) -> bytes:
    validate(msg)
    doc = {"v": VERSION, "type": msg.type.value, "id": msg.id, "ts_ms": msg.ts_ms, "payload": msg.payload}
    return json.dumps(doc, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(msg: Message) -> bytes:
    body = encode_body(msg)
    if len(body) > MAX_FRAME_BYTES:
        raise OversizeError(f"frame body of {len(body)} bytes exceeds {MAX_FRAME_BYTES}")
    return HEADER.pack(len(body)) + body


def check_length(length: int) -> None:
    if length > MAX_FRAME_BYTES:
        raise OversizeError(f"declared frame length {length} exceeds {MAX_FRAME_BYTES}")


def decode_body(body: bytes) -> Message:
    # offsets in errors count from the start of the frame, header included
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("invalid UTF-8", HEADER_SIZE + exc.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed JSON: {exc.msg}", HEADER_SIZE + offset) from None
    if not isinstance(doc, dict):
        raise ParseError("frame body must be a JSON object", HEADER_SIZE)
    if doc.get("v") != VERSION:
        raise ProtocolError(f"unsupported protocol version {doc.get('v')!r}")
    for key in ("type", "id", "ts_ms", "payload"):
        if key not in doc:
            raise ProtocolError(f"frame missing {key!r}")
    extra = set(doc) - {"v", "type", "id", "ts_ms", "payload"}
    if extra:
        raise ProtocolError(f"unexpected frame fields {sorted(extra)}")
    msg = Message(_message_type(doc["type"]), doc["payload"], id=doc["id"], ts_ms=doc["ts_ms"])
    validate(msg)
    return msg


def decode(data: bytes) -> Message:
    """Decode exactly one complete frame."""
    if len(data) < HEADER_SIZE:
        raise FramingError(f"truncated header ({len(data)} of {HEADER_SIZE} bytes)")
    (length,) = HEADER.unpack_from(data)
    check_length(length)
    if len(data) < HEADER_SIZE + length:
        raise FramingError(f"truncated frame ({len(data) - HEADER_SIZE} of {length} body bytes)")
    if len(data) > HEADER_SIZE + length:
        raise FramingError(f"{len(data) - HEADER_SIZE - length} trailing bytes after frame")
    return decode_body(data[HEADER_SIZE:])


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, get whole messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= HEADER_SIZE:
            (length,) = HEADER.unpack_from(self._buf)
            check_length(length)
            end = HEADER_SIZE + length
            if len(self._buf) < end:
                break
            body = bytes(self._buf[HEADER_SIZE:end])
            del self._buf[:end]
            out.append(decode_body(body))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        if self._buf:
            raise FramingError(f"stream ended with {len(self._buf)} bytes of a partial frame")


def b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode(text: str) -> bytes:
    """Strict decode. ``a2b_base64`` silently skips foreign characters, so
    the decoded length is checked against the input length instead."""
    if not isinstance(text, str) or len(text) % 4:
        raise ProtocolError("invalid base64 payload: length is not a multiple of 4")
    try:
        raw = binascii.a2b_base64(text)
    except (ValueError, binascii.Error) as exc:
        raise ProtocolError(f"invalid base64 payload: {exc}") from None
    pad = 2 if text.endswith("==") else 1 if text.endswith("=") else 0
    if len(raw) != len(text) // 4 * 3 - pad:
        raise ProtocolError("invalid base64 payload: unexpected characters")
    return raw


# -- asyncio stream helpers ------------------------------------------------

async def read_message(reader: asyncio.StreamReader) -> Optional[Message]:
    """Next message from the stream, or None on a clean EOF between frames."""
    body = await read_body(reader)
    return None if body is None else decode_body(body)


async def read_body(reader: asyncio.StreamReader) -> Optional[bytes]:
    """Raw body of the next frame, or None on a clean EOF between frames."""
    try:
        header = await reader.readexactly(HEADER_SIZE)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise FramingError("connection closed inside a frame header") from None
    (length,) = HEADER.unpack(header)
    check_length(length)
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise FramingError(f"connection closed inside a {length}-byte frame") from None
    return body


async def write_message(writer: asyncio.StreamWriter, msg: Message) -> None:
    writer.write(encode(msg))
    await writer.drain()


class Connection:
    """Client side of one connection: strictly one request in flight."""

    def __init__(self, reader, writer, timeout: float = DEFAULT_TIMEOUT_S):
        self.reader = reader
        self.writer = writer
        self.timeout = timeout
        self._lock = asyncio.Lock()

    @classmethod
    async def open(cls, address: str, timeout: float = DEFAULT_TIMEOUT_S) -> "Connection":
        host, port = split_address(address)
        reader, writer = await asyncio.wait_for(
            asyncio.open_connection(host, port, limit=MAX_FRAME_BYTES + HEADER_SIZE), timeout
        )
        return cls(reader, writer, timeout)

    async def request(self, msg: Message) -> Message:
        return await self.request_frame(encode(msg), msg.id)

    async def request_frame(self, frame: bytes, msg_id: str) -> Message:
        """Send an already encoded frame and await the reply to ``msg_id``."""
        async with self._lock:
            self.writer.write(frame)
            await self.writer.drain()
            reply = await asyncio.wait_for(read_message(self.reader), self.timeout)
        if reply is None:
            raise ProtocolError("connection closed before a reply")
        if reply.id != msg_id:
            raise ProtocolError(f"reply id {reply.id} does not match request {msg_id}")
        return reply

    async def close(self) -> None:
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def request_once(address: str, msg: Message, timeout: float = DEFAULT_TIMEOUT_S) -> Message:
    conn = await Connection.open(address, timeout)
    try:
        return await conn.request(msg)
    finally:
        await conn.close()


def split_address(address: str) -> tuple:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {address!r}")
    return host or "127.0.0.1", int(port)
