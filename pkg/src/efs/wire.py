"""Binary request/response framing for the file-service protocol.

Frame layout (all integers big-endian):

    frame_len : u32   bytes after this field (= 8 + payload length)
    xid       : u32   client transaction id, echoed in the response
    opcode    : u16   request; the response carries the status code here
    version   : u16   always 1
    payload   : opcode-specific fields

Field encodings: strings are u16-length-prefixed byte strings, bulk data is
u32-length-prefixed, handles are fixed 32 bytes, offsets and counts are u64.
Attribute blocks are 37 bytes: kind u8, size u64, mtime/atime/ctime u64
nanoseconds, mode u32.

Example READ request (xid 7, zero offset, 16 bytes, handle 00..1f):

    00000038 00000007 0005 0001
    000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f
    0000000000000000 0000000000000010

Any byte stream that is not a well-formed frame raises BadMessage; error
responses always carry an empty payload.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

from .errors import (
    AccessDenied,
    BadKey,
    BadMessage,
    ChecksumMismatch,
    CorruptHeader,
    CrossAttach,
    EfsError,
    EmptyName,
    Exists,
    InvalidEncoding,
    InvalidName,
    IoFailure,
    IsDirectory,
    NameTooLong,
    NoEntry,
    NotAnEfsDirectory,
    NotAnEfsName,
    NotDirectory,
    NotEmpty,
    PassphraseTooShort,
    StaleHandle,
)

VERSION = 1
HANDLE_SIZE = 32
MAX_FRAME = 1 << 24  # 16 MiB hard ceiling per frame

# Opcodes
OP_ATTACH = 1
OP_DETACH = 2
OP_LOOKUP = 3
OP_GETATTR = 4
OP_READ = 5
OP_WRITE = 6
OP_CREATE = 7
OP_MKDIR = 8
OP_REMOVE = 9
OP_RENAME = 10
OP_READDIR = 11
OP_SYMLINK = 12
OP_READLINK = 13
OP_LIST_ATTACHES = 14

# Status codes
OK = 0
NOENT = 1
ACCES = 2
BADKEY = 3
STALE = 4
IO = 5
EXIST = 6
NOTDIR = 7
ISDIR = 8
NAMETOOLONG = 9
NOTEMPTY = 10
CROSSATTACH = 11
BADMSG = 12

_MAX_STATUS = BADMSG

STATUS_NAMES = {
    OK: "OK", NOENT: "NOENT", ACCES: "ACCES", BADKEY: "BADKEY",
    STALE: "STALE", IO: "IO", EXIST: "EXIST", NOTDIR: "NOTDIR",
    ISDIR: "ISDIR", NAMETOOLONG: "NAMETOOLONG", NOTEMPTY: "NOTEMPTY",
    CROSSATTACH: "CROSSATTACH", BADMSG: "BADMSG",
}

# Entry kinds used in attributes and directory listings
KIND_FILE = 1
KIND_DIR = 2
KIND_SYMLINK = 3


@dataclass(frozen=True)
class Attributes:
    kind: int
    size: int
    mtime_ns: int
    atime_ns: int
    ctime_ns: int
    mode: int


_ATTRS_STRUCT = struct.Struct(">BQQQQI")
_HEAD_STRUCT = struct.Struct(">IIHH")

# Field type codes:
#   h handle(32)   s str16 bytes   S str16 -> bytearray (secrets)
#   d data32       q u64           L u32          B u8 bool
#   a attributes   E entry list    N name list
REQUEST_SCHEMAS: dict[int, tuple[tuple[str, str], ...]] = {
    OP_ATTACH: (("backing_dir", "s"), ("attach_name", "s"),
                ("passphrase", "S"), ("obscure", "B")),
    OP_DETACH: (("attach_name", "s"),),
    OP_LOOKUP: (("handle", "h"), ("name", "s")),
    OP_GETATTR: (("handle", "h"),),
    OP_READ: (("handle", "h"), ("offset", "q"), ("count", "q")),
    OP_WRITE: (("handle", "h"), ("offset", "q"), ("data", "d")),
    OP_CREATE: (("handle", "h"), ("name", "s"), ("mode", "L")),
    OP_MKDIR: (("handle", "h"), ("name", "s"), ("mode", "L")),
    OP_REMOVE: (("handle", "h"), ("name", "s")),
    OP_RENAME: (("src_handle", "h"), ("src_name", "s"),
                ("dst_handle", "h"), ("dst_name", "s")),
    OP_READDIR: (("handle", "h"), ("cursor", "s")),
    OP_SYMLINK: (("handle", "h"), ("name", "s"), ("target", "s")),
    OP_READLINK: (("handle", "h"),),
    OP_LIST_ATTACHES: (),
}

RESPONSE_SCHEMAS: dict[int, tuple[tuple[str, str], ...]] = {
    OP_ATTACH: (("handle", "h"),),
    OP_DETACH: (),
    OP_LOOKUP: (("handle", "h"), ("attrs", "a")),
    OP_GETATTR: (("attrs", "a"),),
    OP_READ: (("data", "d"),),
    OP_WRITE: (("written", "q"),),
    OP_CREATE: (("handle", "h"),),
    OP_MKDIR: (("handle", "h"),),
    OP_REMOVE: (),
    OP_RENAME: (),
    OP_READDIR: (("entries", "E"), ("next_cursor", "s")),
    OP_SYMLINK: (("handle", "h"),),
    OP_READLINK: (("target", "s"),),
    OP_LIST_ATTACHES: (("names", "N"),),
}

# EfsError subclass -> wire status. Checked in order, so subclasses first.
_ERROR_STATUS: tuple[tuple[type, int], ...] = (
    (NoEntry, NOENT),
    (NotAnEfsDirectory, NOENT),
    (AccessDenied, ACCES),
    (BadKey, BADKEY),
    (PassphraseTooShort, BADKEY),
    (StaleHandle, STALE),
    (Exists, EXIST),
    (NotDirectory, NOTDIR),
    (IsDirectory, ISDIR),
    (NameTooLong, NAMETOOLONG),
    (NotEmpty, NOTEMPTY),
    (CrossAttach, CROSSATTACH),
    (BadMessage, BADMSG),
    (IoFailure, IO),
    (CorruptHeader, IO),
    (ChecksumMismatch, IO),
    (NotAnEfsName, IO),
    (InvalidName, IO),
    (EmptyName, IO),
    (InvalidEncoding, IO),
)

STATUS_ERRORS: dict[int, type] = {
    NOENT: NoEntry,
    ACCES: AccessDenied,
    BADKEY: BadKey,
    STALE: StaleHandle,
    IO: IoFailure,
    EXIST: Exists,
    NOTDIR: NotDirectory,
    ISDIR: IsDirectory,
    NAMETOOLONG: NameTooLong,
    NOTEMPTY: NotEmpty,
    CROSSATTACH: CrossAttach,
    BADMSG: BadMessage,
}


def error_status(exc: BaseException) -> int:
    """Wire status for an exception; anything unrecognized is IO."""
    for cls, status in _ERROR_STATUS:
        if isinstance(exc, cls):
            return status
    return IO


def status_error(status: int, detail: str = "") -> EfsError:
    cls = STATUS_ERRORS.get(status, IoFailure)
    return cls(detail or STATUS_NAMES.get(status, str(status)))


class _Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> None:
        self._parts.append(struct.pack(">B", v))

    def u16(self, v: int) -> None:
        self._parts.append(struct.pack(">H", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack(">I", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack(">Q", v))

    def raw(self, data: bytes) -> None:
        self._parts.append(bytes(data))

    def str16(self, data: bytes) -> None:
        if len(data) > 0xFFFF:
            raise ValueError("string field too long")
        self.u16(len(data))
        self.raw(data)

    def data32(self, data: bytes) -> None:
        if len(data) > MAX_FRAME - 64:
            raise ValueError("data field too long")
        self.u32(len(data))
        self.raw(data)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise BadMessage("frame truncated")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def str16(self) -> bytes:
        return self.take(self.u16())

    def data32(self) -> bytes:
        return self.take(self.u32())

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise BadMessage("trailing garbage after payload")


def _pack_field(w: _Writer, code: str, value) -> None:
    if code == "h":
        if not isinstance(value, (bytes, bytearray)) or len(value) != HANDLE_SIZE:
            raise ValueError("handle must be exactly 32 bytes")
        w.raw(value)
    elif code in ("s", "S"):
        w.str16(bytes(value))
    elif code == "d":
        w.data32(bytes(value))
    elif code == "q":
        w.u64(value)
    elif code == "L":
        w.u32(value)
    elif code == "B":
        w.u8(1 if value else 0)
    elif code == "a":
        w.raw(pack_attrs(value))
    elif code == "E":
        w.u32(len(value))
        for name, kind in value:
            w.str16(bytes(name))
            w.u8(kind)
    elif code == "N":
        w.u32(len(value))
        for name in value:
            w.str16(bytes(name))
    else:  # pragma: no cover - schema typo guard
        raise ValueError(f"unknown field code {code!r}")


def _unpack_field(r: _Reader, code: str):
    if code == "h":
        return r.take(HANDLE_SIZE)
    if code == "s":
        return r.str16()
    if code == "S":
        return bytearray(r.str16())
    if code == "d":
        return r.data32()
    if code == "q":
        return r.u64()
    if code == "L":
        return r.u32()
    if code == "B":
        v = r.u8()
        if v > 1:
            raise BadMessage("boolean field out of range")
        return bool(v)
    if code == "a":
        return unpack_attrs(r.take(_ATTRS_STRUCT.size))
    if code == "E":
        n = r.u32()
        if n > MAX_FRAME // 3:
            raise BadMessage("entry count implausible")
        return [(r.str16(), r.u8()) for _ in range(n)]
    if code == "N":
        n = r.u32()
        if n > MAX_FRAME // 3:
            raise BadMessage("name count implausible")
        return [r.str16() for _ in range(n)]
    raise ValueError(f"unknown field code {code!r}")  # pragma: no cover


def pack_attrs(attrs: Attributes) -> bytes:
    return _ATTRS_STRUCT.pack(attrs.kind, attrs.size, attrs.mtime_ns,
                              attrs.atime_ns, attrs.ctime_ns, attrs.mode)


def unpack_attrs(raw: bytes) -> Attributes:
    kind, size, mtime, atime, ctime, mode = _ATTRS_STRUCT.unpack(raw)
    return Attributes(kind, size, mtime, atime, ctime, mode)


def _frame(xid: int, code: int, payload: bytes) -> bytes:
    return _HEAD_STRUCT.pack(8 + len(payload), xid & 0xFFFFFFFF, code, VERSION) + payload


def _split_frame(frame: bytes) -> tuple[int, int, bytes]:
    """Validate the common header; returns (xid, opcode-or-status, payload)."""
    if len(frame) < _HEAD_STRUCT.size:
        raise BadMessage("frame shorter than header")
    frame_len, xid, code, version = _HEAD_STRUCT.unpack_from(frame)
    if frame_len != len(frame) - 4:
        raise BadMessage("frame length field does not match frame")
    if version != VERSION:
        raise BadMessage(f"unsupported protocol version {version}")
    return xid, code, frame[_HEAD_STRUCT.size:]


def encode_request(xid: int, opcode: int, **fields) -> bytes:
    schema = REQUEST_SCHEMAS[opcode]
    w = _Writer()
    for fname, code in schema:
        _pack_field(w, code, fields[fname])
    return _frame(xid, opcode, w.getvalue())


def decode_request(frame: bytes) -> tuple[int, int, dict]:
    """Parse a request frame; raises BadMessage for anything malformed."""
    xid, opcode, payload = _split_frame(frame)
    schema = REQUEST_SCHEMAS.get(opcode)
    if schema is None:
        raise BadMessage(f"unknown opcode {opcode}")
    r = _Reader(payload)
    fields = {fname: _unpack_field(r, code) for fname, code in schema}
    r.expect_end()
    return xid, opcode, fields


def encode_response(xid: int, status: int, opcode: int | None = None,
                    **fields) -> bytes:
    """Encode a response; non-OK responses always have an empty payload."""
    if status != OK:
        return _frame(xid, status, b"")
    schema = RESPONSE_SCHEMAS[opcode]
    w = _Writer()
    for fname, code in schema:
        _pack_field(w, code, fields[fname])
    return _frame(xid, status, w.getvalue())


def decode_response(frame: bytes, opcode: int) -> tuple[int, int, dict]:
    xid, status, payload = _split_frame(frame)
    if status > _MAX_STATUS:
        raise BadMessage(f"unknown status {status}")
    if status != OK:
        if payload:
            raise BadMessage("error response with non-empty payload")
        return xid, status, {}
    r = _Reader(payload)
    fields = {fname: _unpack_field(r, code) for fname, code in RESPONSE_SCHEMAS[opcode]}
    r.expect_end()
    return xid, status, fields


def try_peek_xid(frame: bytes) -> int:
    """Best-effort xid for answering malformed frames; 0 when unknowable."""
    if len(frame) >= 8:
        return struct.unpack_from(">I", frame, 4)[0]
    return 0


def read_frame(sock: socket.socket, max_frame: int = MAX_FRAME) -> bytes | None:
    """Read one length-prefixed frame; None on clean EOF.

    Raises BadMessage when the length field is implausible, in which case the
    caller should drop the connection (the stream can no longer be framed).
    """
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    frame_len = struct.unpack(">I", head)[0]
    if frame_len < 8 or frame_len > max_frame:
        raise BadMessage("frame length out of bounds")
    body = _recv_exact(sock, frame_len)
    if body is None:
        raise BadMessage("connection closed mid-frame")
    return head + body


def write_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """Exactly n bytes, or None on EOF at a frame boundary."""
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if got == 0:
                return None
            raise BadMessage("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)
