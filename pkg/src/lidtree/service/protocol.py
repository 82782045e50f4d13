"""Binary frame codec for the key-value wire protocol (see docs/protocol.md)."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from ..errors import ProtocolError
from ..node_format import MAX_KEY, MAX_VALUE

REQUEST_MAGIC = b"LTQ1"
RESPONSE_MAGIC = b"LTR1"
MAX_REQUEST_FRAME = 64 * 1024
MAX_RESPONSE_FRAME = 4 * 1024 * 1024

_PREFIX = struct.Struct("<4sI")  # magic, body length
_REQ_HEAD = struct.Struct("<QBH")  # request_id, opcode, key_len
_RESP_HEAD = struct.Struct("<QBI")  # request_id, status, item_count
_U16 = struct.Struct("<H")


class Opcode(IntEnum):
    GET = 1
    SCAN = 2
    PUT = 3
    UPDATE = 4
    DELETE = 5


class Status(IntEnum):
    OK = 0
    NOTFOUND = 1
    ERR = 2
    OVERLOADED = 3


@dataclass(frozen=True)
class Request:
    request_id: int
    opcode: Opcode
    key: bytes
    key2: bytes = b""  # SCAN upper bound
    value: bytes = b""  # PUT / UPDATE payload


@dataclass(frozen=True)
class Response:
    request_id: int
    status: Status
    items: list[tuple[bytes, bytes]] = field(default_factory=list)

    @property
    def value(self) -> bytes | None:
        return self.items[0][1] if self.status == Status.OK and self.items else None

    @property
    def message(self) -> str:
        """Error text carried by ERR responses."""
        if self.status == Status.ERR and self.items:
            return self.items[0][1].decode("utf-8", "replace")
        return ""


def error_response(request_id: int, message: str) -> Response:
    return Response(request_id, Status.ERR, [(b"", message.encode()[:1024])])


def _u16_blob(data: bytes, limit: int, what: str) -> bytes:
    if len(data) > limit:
        raise ProtocolError(f"{what} of {len(data)} bytes exceeds {limit}")
    return _U16.pack(len(data)) + data


def encode_request(req: Request) -> bytes:
    op = Opcode(req.opcode)
    if len(req.key) > MAX_KEY:
        raise ProtocolError(f"key of {len(req.key)} bytes exceeds {MAX_KEY}")
    body = [_REQ_HEAD.pack(req.request_id, op, len(req.key)), req.key]
    if op == Opcode.SCAN:
        body.append(_u16_blob(req.key2, MAX_KEY, "upper key"))
    elif op in (Opcode.PUT, Opcode.UPDATE):
        body.append(_u16_blob(req.value, MAX_VALUE, "value"))
    payload = b"".join(body)
    frame = _PREFIX.pack(REQUEST_MAGIC, len(payload)) + payload
    if len(frame) > MAX_REQUEST_FRAME:
        raise ProtocolError("request frame exceeds 64 KiB")
    return frame


def encode_response(resp: Response) -> bytes:
    parts = [_RESP_HEAD.pack(resp.request_id, Status(resp.status), len(resp.items))]
    for key, value in resp.items:
        parts.append(_U16.pack(len(key)))
        parts.append(key)
        parts.append(_U16.pack(len(value)))
        parts.append(value)
    payload = b"".join(parts)
    if len(payload) + _PREFIX.size > MAX_RESPONSE_FRAME:
        raise ProtocolError("response frame too large")
    return _PREFIX.pack(RESPONSE_MAGIC, len(payload)) + payload


class _Cursor:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError("truncated frame")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.pos} trailing bytes in frame")


def frame_length(prefix: bytes, magic: bytes, limit: int) -> int:
    """Body length announced by an 8-byte frame prefix."""
    got, length = _PREFIX.unpack(prefix)
    if got != magic:
        raise ProtocolError(f"bad magic {got!r}")
    if length + _PREFIX.size > limit:
        raise ProtocolError(f"frame of {length} bytes exceeds {limit}")
    return length


PREFIX_SIZE = _PREFIX.size


def decode_request_body(body: bytes) -> Request:
    cur = _Cursor(body)
    request_id, opcode, key_len = _REQ_HEAD.unpack(cur.take(_REQ_HEAD.size))
    try:
        op = Opcode(opcode)
    except ValueError:
        raise ProtocolError(f"unknown opcode {opcode}") from None
    if key_len > MAX_KEY:
        raise ProtocolError(f"key length {key_len} exceeds {MAX_KEY}")
    key = cur.take(key_len)
    key2 = value = b""
    if op == Opcode.SCAN:
        n = cur.u16()
        if n > MAX_KEY:
            raise ProtocolError(f"key length {n} exceeds {MAX_KEY}")
        key2 = cur.take(n)
    elif op in (Opcode.PUT, Opcode.UPDATE):
        n = cur.u16()
        if n > MAX_VALUE:
            raise ProtocolError(f"value length {n} exceeds {MAX_VALUE}")
        value = cur.take(n)
    cur.done()
    return Request(request_id, op, key, key2, value)


def decode_response_body(body: bytes) -> Response:
    cur = _Cursor(body)
    request_id, status, count = _RESP_HEAD.unpack(cur.take(_RESP_HEAD.size))
    try:
        st = Status(status)
    except ValueError:
        raise ProtocolError(f"unknown status {status}") from None
    items = []
    for _ in range(count):
        key = cur.take(cur.u16())
        items.append((key, cur.take(cur.u16())))
    cur.done()
    return Response(request_id, st, items)


def decode_request(frame: bytes) -> Request:
    length = frame_length(frame[:PREFIX_SIZE], REQUEST_MAGIC, MAX_REQUEST_FRAME)
    if len(frame) != PREFIX_SIZE + length:
        raise ProtocolError("frame length mismatch")
    return decode_request_body(frame[PREFIX_SIZE:])


def decode_response(frame: bytes) -> Response:
    length = frame_length(frame[:PREFIX_SIZE], RESPONSE_MAGIC, MAX_RESPONSE_FRAME)
    if len(frame) != PREFIX_SIZE + length:
        raise ProtocolError("frame length mismatch")
    return decode_response_body(frame[PREFIX_SIZE:])
