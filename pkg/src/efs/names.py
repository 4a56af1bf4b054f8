"""Deterministic encryption of path components and symlink targets.

A cleartext name is packed into a record:

    checksum   : u16 BE, byte-sum of the name modulo 65536
    name bytes : 1..174 bytes (no NUL, no '/'), up to 1024 for link targets
    padding    : zero bytes up to a multiple of 16

The record blocks are whitened with mask blocks S_0.. (no IV: encryption has
to be deterministic so a cleartext lookup can recompute the stored name),
encrypted per block with AES-128-ECB under k2, and rendered in a
filename-safe base64 alphabet.  The checksum sits in the leading bytes so a
wrong key is detected when a decrypt fails verification.
"""

from __future__ import annotations

import base64
import struct

from .crypto import BLOCK_SIZE, MaskStream, SubKeyPair, open_range, seal_range
from .errors import (
    ChecksumMismatch,
    EmptyName,
    InvalidEncoding,
    InvalidName,
    NameTooLong,
    NotAnEfsName,
)

ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_"
_ALPHABET_SET = frozenset(ALPHABET)

MAX_NAME_BYTES = 174        # keeps the encoded component within 255 chars
MAX_LINK_TARGET_BYTES = 1024
_MAX_NAME_RECORD = 176      # 2-byte checksum + 174 name bytes, block padded
_MAX_LINK_RECORD = 1040

_ZERO_IV = b"\x00" * BLOCK_SIZE


def _byte_sum(data: bytes) -> int:
    return sum(data) % 65536


def name_checksum(name: bytes) -> int:
    """Byte-sum of the name modulo 2^16."""
    if not name:
        raise EmptyName("name is empty")
    if len(name) > MAX_NAME_BYTES:
        raise NameTooLong(f"name exceeds {MAX_NAME_BYTES} bytes")
    return _byte_sum(name)


def encode_component(raw: bytes) -> str:
    """Filename-safe base64 (no padding characters) of ``raw``."""
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def decode_component(text: str) -> bytes:
    """Exact inverse of encode_component; rejects non-canonical input."""
    if not set(text) <= _ALPHABET_SET:
        raise InvalidEncoding("character outside encoding alphabet")
    if len(text) % 4 == 1:
        raise InvalidEncoding("impossible encoded length")
    padded = text + "=" * (-len(text) % 4)
    try:
        raw = base64.urlsafe_b64decode(padded.encode("ascii"))
    except ValueError as exc:
        raise InvalidEncoding("undecodable text") from exc
    # Catches nonzero trailing bits, which b64decode silently drops.
    if encode_component(raw) != text:
        raise InvalidEncoding("non-canonical trailing bits")
    return raw


def _validate_name(name: bytes) -> None:
    if not isinstance(name, (bytes, bytearray)):
        raise InvalidName("name must be bytes")
    if not name:
        raise EmptyName("name is empty")
    if len(name) > MAX_NAME_BYTES:
        raise NameTooLong(f"name exceeds {MAX_NAME_BYTES} bytes")
    if b"/" in name or b"\x00" in name:
        raise InvalidName("name contains '/' or NUL")
    if name in (b".", b".."):
        raise InvalidName("'.' and '..' are reserved")


def _validate_link_target(target: bytes) -> None:
    if not isinstance(target, (bytes, bytearray)):
        raise InvalidName("target must be bytes")
    if not target:
        raise EmptyName("link target is empty")
    if len(target) > MAX_LINK_TARGET_BYTES:
        raise NameTooLong(f"link target exceeds {MAX_LINK_TARGET_BYTES} bytes")
    if b"\x00" in target:
        raise InvalidName("link target contains NUL")


def _seal_record(data: bytes, keys: SubKeyPair, mask: MaskStream) -> str:
    record = struct.pack(">H", _byte_sum(data)) + bytes(data)
    record += b"\x00" * (-len(record) % BLOCK_SIZE)
    cipher = seal_range(0, record, mask, _ZERO_IV, keys.k2)
    return encode_component(cipher)


def _open_record(text: str, keys: SubKeyPair, mask: MaskStream,
                 max_record: int, allow_slash: bool) -> bytes:
    try:
        cipher = decode_component(text)
    except InvalidEncoding as exc:
        raise NotAnEfsName(str(exc)) from exc
    if not cipher or len(cipher) % BLOCK_SIZE or len(cipher) > max_record:
        raise NotAnEfsName("record length not a usable block multiple")
    record = open_range(0, cipher, mask, _ZERO_IV, keys.k2)
    want = struct.unpack(">H", record[:2])[0]
    data = record[2:].rstrip(b"\x00")
    if not data or _byte_sum(data) != want:
        raise ChecksumMismatch("embedded checksum failed")
    # A passing checksum on garbage is ~2^-16; these reject most of the rest.
    if b"\x00" in data or (not allow_slash and (b"/" in data or data in (b".", b".."))):
        raise ChecksumMismatch("decrypted record is not a valid name")
    return data


def seal_name(name: bytes, keys: SubKeyPair, mask: MaskStream) -> str:
    """Deterministically encrypt one path component."""
    _validate_name(name)
    return _seal_record(name, keys, mask)


def open_name(text: str, keys: SubKeyPair, mask: MaskStream) -> bytes:
    """Decrypt a stored component; ChecksumMismatch flags a wrong key or a
    foreign entry, NotAnEfsName anything that never was an encrypted name."""
    return _open_record(text, keys, mask, _MAX_NAME_RECORD, allow_slash=False)


def seal_link_target(target: bytes, keys: SubKeyPair, mask: MaskStream) -> str:
    """Encrypt a symlink target; same scheme as names but '/' is allowed."""
    _validate_link_target(target)
    return _seal_record(target, keys, mask)


def open_link_target(text: str, keys: SubKeyPair, mask: MaskStream) -> bytes:
    return _open_record(text, keys, mask, _MAX_LINK_RECORD, allow_slash=True)
