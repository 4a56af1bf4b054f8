"""Content cryptography: subkeys, whitening mask, block transform, file format.

On-disk encrypted file format (bit-exact, version 1):

    header    : 32 bytes
        magic            : 4 bytes  -> b"EFS1"
        version          : u16 BE   -> 1
        flags            : u16 BE   -> bit 0 = ascii-armored payload, rest 0
        plaintext_length : u64 BE   -> cleartext size in bytes
        iv               : 16 bytes -> random, fixed for the file's lifetime
    payload   : ceil(plaintext_length / 16) ciphertext blocks of 16 bytes
                (binary mode); in ascii-armored mode the same ciphertext is
                stored as filename-safe base64 text instead of raw bytes.

Each 16-byte cleartext block at position ``i`` is whitened with the
precomputed mask block ``S[i mod M]`` XOR the file IV, then encrypted with
AES-128-ECB under the second subkey.  Decryption inverts the two steps.  The
mask keeps equal plaintext blocks from producing equal ciphertext inside one
period; the IV does the same across files.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import CorruptHeader, InvalidEncoding, IoFailure, PassphraseTooShort

BLOCK_SIZE = 16
HEADER_SIZE = 32
MAGIC = b"EFS1"
FORMAT_VERSION = 1
FLAG_ASCII_ARMOR = 0x0001

MIN_PASSPHRASE_BYTES = 16
DEFAULT_KDF_ITERATIONS = 10_000
DEFAULT_MASK_BLOCKS = 4096

# Fixed, published per-label salts; determinism is what makes re-attach work
# without any stored key material.
_SALT_MASK = b"EFS-mask"
_SALT_BLOCK = b"EFS-block"

_ZERO_BLOCK = b"\x00" * BLOCK_SIZE

_HEADER_STRUCT = struct.Struct(">4sHHQ16s")


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


def _ecb_encrypt(key: bytes, data: bytes) -> bytes:
    return Cipher(algorithms.AES(key), modes.ECB()).encryptor().update(data)


def _ecb_decrypt(key: bytes, data: bytes) -> bytes:
    return Cipher(algorithms.AES(key), modes.ECB()).decryptor().update(data)


@dataclass(frozen=True)
class SubKeyPair:
    """The two independent 16-byte subkeys derived from one passphrase."""

    k1: bytes  # mask-generation key
    k2: bytes  # block-encryption key


def derive_subkeys(passphrase: bytes | bytearray | str,
                   iterations: int = DEFAULT_KDF_ITERATIONS) -> SubKeyPair:
    """Derive the deterministic (k1, k2) pair from a passphrase.

    PBKDF2-HMAC-SHA256 with a fixed salt per subkey label; same phrase always
    yields the same pair, and the two labels keep k1 and k2 independent.

    Raises PassphraseTooShort if the phrase is under 16 bytes.
    """
    if isinstance(passphrase, str):
        passphrase = passphrase.encode("utf-8")
    passphrase = bytes(passphrase)
    if len(passphrase) < MIN_PASSPHRASE_BYTES:
        raise PassphraseTooShort(
            f"passphrase must be at least {MIN_PASSPHRASE_BYTES} bytes"
        )
    k1 = hashlib.pbkdf2_hmac("sha256", passphrase, _SALT_MASK, iterations, 16)
    k2 = hashlib.pbkdf2_hmac("sha256", passphrase, _SALT_BLOCK, iterations, 16)
    return SubKeyPair(k1=k1, k2=k2)


class MaskStream:
    """Precomputed whitening blocks S_0..S_{M-1}; immutable once generated."""

    __slots__ = ("_blocks", "period_blocks")

    def __init__(self, blocks: bytes, period_blocks: int):
        if period_blocks < 1 or len(blocks) != period_blocks * BLOCK_SIZE:
            raise ValueError("mask block count does not match data")
        self._blocks = bytes(blocks)
        self.period_blocks = period_blocks

    @property
    def blocks(self) -> bytes:
        return self._blocks

    def block(self, i: int) -> bytes:
        j = (i % self.period_blocks) * BLOCK_SIZE
        return self._blocks[j : j + BLOCK_SIZE]

    def whitening(self, first_block: int, nblocks: int, iv: bytes) -> bytes:
        """Concatenated ``S[(first_block+j) mod M] XOR iv`` for j in [0, nblocks)."""
        if nblocks == 0:
            return b""
        period = len(self._blocks)
        start = (first_block % self.period_blocks) * BLOCK_SIZE
        need = nblocks * BLOCK_SIZE
        reps = (start + need + period - 1) // period
        tiled = (self._blocks * reps)[start : start + need]
        return _xor(tiled, iv * nblocks)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, MaskStream) and self._blocks == other._blocks

    def __hash__(self) -> int:
        return hash(self._blocks)


def generate_mask(k1: bytes, period_blocks: int = DEFAULT_MASK_BLOCKS) -> MaskStream:
    """Generate the whitening mask: AES-OFB keystream under k1, zero seed.

    S_0 = E_k1(0^16), S_{j+1} = E_k1(S_j); deterministic for a given k1.
    """
    enc = Cipher(algorithms.AES(k1), modes.OFB(_ZERO_BLOCK)).encryptor()
    blocks = enc.update(b"\x00" * (period_blocks * BLOCK_SIZE))
    return MaskStream(blocks, period_blocks)


def seal_range(first_block: int, plain: bytes, mask: MaskStream, iv: bytes,
               k2: bytes) -> bytes:
    """Encrypt consecutive whole blocks starting at index ``first_block``."""
    if len(plain) % BLOCK_SIZE:
        raise ValueError("plaintext must be a multiple of the block size")
    w = mask.whitening(first_block, len(plain) // BLOCK_SIZE, iv)
    return _ecb_encrypt(k2, _xor(plain, w))


def open_range(first_block: int, cipher: bytes, mask: MaskStream, iv: bytes,
               k2: bytes) -> bytes:
    """Inverse of seal_range."""
    if len(cipher) % BLOCK_SIZE:
        raise ValueError("ciphertext must be a multiple of the block size")
    w = mask.whitening(first_block, len(cipher) // BLOCK_SIZE, iv)
    return _xor(_ecb_decrypt(k2, cipher), w)


def seal_block(i: int, plain: bytes, mask: MaskStream, iv: bytes, k2: bytes) -> bytes:
    """Encrypt one 16-byte block at cleartext block position ``i``."""
    if len(plain) != BLOCK_SIZE:
        raise ValueError("plain block must be exactly 16 bytes")
    return seal_range(i, plain, mask, iv, k2)


def open_block(i: int, cipher: bytes, mask: MaskStream, iv: bytes, k2: bytes) -> bytes:
    """Decrypt one 16-byte block at cleartext block position ``i``."""
    if len(cipher) != BLOCK_SIZE:
        raise ValueError("cipher block must be exactly 16 bytes")
    return open_range(i, cipher, mask, iv, k2)


@dataclass(frozen=True)
class FileHeader:
    version: int
    flags: int
    plaintext_length: int
    iv: bytes

    @property
    def ascii_armored(self) -> bool:
        return bool(self.flags & FLAG_ASCII_ARMOR)

    @property
    def payload_blocks(self) -> int:
        return (self.plaintext_length + BLOCK_SIZE - 1) // BLOCK_SIZE


def build_header(plaintext_length: int, iv: bytes, flags: int = 0) -> bytes:
    """Serialize a header; exactly 32 bytes, integers big-endian."""
    if len(iv) != BLOCK_SIZE:
        raise ValueError("iv must be exactly 16 bytes")
    if not 0 <= plaintext_length < 2**64:
        raise ValueError("plaintext_length out of range")
    return _HEADER_STRUCT.pack(MAGIC, FORMAT_VERSION, flags, plaintext_length, iv)


def parse_header(raw: bytes) -> FileHeader:
    """Parse the 32-byte preamble; raises CorruptHeader on bad magic/version."""
    if len(raw) < HEADER_SIZE:
        raise CorruptHeader("header truncated")
    magic, version, flags, length, iv = _HEADER_STRUCT.unpack(raw[:HEADER_SIZE])
    if magic != MAGIC:
        raise CorruptHeader(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptHeader(f"unsupported version {version}")
    return FileHeader(version=version, flags=flags, plaintext_length=length, iv=iv)


def _blocks_for(length: int) -> int:
    return (length + BLOCK_SIZE - 1) // BLOCK_SIZE


class EncryptedFile:
    """Byte-granular encrypted I/O over an OS file descriptor.

    The header is re-read on every operation so independently opened
    descriptors for one backing file stay coherent; callers serialize
    concurrent writes to the same file externally.
    """

    def __init__(self, fd: int, keys: SubKeyPair, mask: MaskStream,
                 *, owns_fd: bool = True):
        self._fd = fd
        self._keys = keys
        self._mask = mask
        self._owns_fd = owns_fd

    @classmethod
    def create(cls, path: str | os.PathLike, keys: SubKeyPair, mask: MaskStream,
               mode: int = 0o600, ascii_armor: bool = False) -> "EncryptedFile":
        """Create a new encrypted file with a fresh random IV and empty payload."""
        flags = FLAG_ASCII_ARMOR if ascii_armor else 0
        try:
            fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_EXCL, mode)
            os.write(fd, build_header(0, os.urandom(BLOCK_SIZE), flags))
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        return cls(fd, keys, mask)

    @classmethod
    def open_path(cls, path: str | os.PathLike, keys: SubKeyPair,
                  mask: MaskStream, writable: bool = True) -> "EncryptedFile":
        try:
            fd = os.open(path, os.O_RDWR if writable else os.O_RDONLY)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        return cls(fd, keys, mask)

    def fileno(self) -> int:
        return self._fd

    def close(self) -> None:
        if self._owns_fd and self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self) -> "EncryptedFile":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- header ------------------------------------------------------------

    def read_header(self) -> FileHeader:
        raw = self._pread(0, HEADER_SIZE)
        return parse_header(raw)

    def _read_or_init_header(self) -> FileHeader:
        # First write on an empty file lays down a fresh header.
        if os.fstat(self._fd).st_size == 0:
            header = FileHeader(FORMAT_VERSION, 0, 0, os.urandom(BLOCK_SIZE))
            self._write_header(header)
            return header
        return self.read_header()

    def _write_header(self, header: FileHeader) -> None:
        self._pwrite(build_header(header.plaintext_length, header.iv, header.flags), 0)

    # -- raw I/O -----------------------------------------------------------

    def _pread(self, offset: int, count: int) -> bytes:
        try:
            chunks = []
            while count > 0:
                chunk = os.pread(self._fd, count, offset)
                if not chunk:
                    break
                chunks.append(chunk)
                offset += len(chunk)
                count -= len(chunk)
            return b"".join(chunks)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def _pwrite(self, data: bytes, offset: int) -> None:
        try:
            view = memoryview(data)
            while view:
                n = os.pwrite(self._fd, view, offset)
                offset += n
                view = view[n:]
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    # -- payload access (binary vs ascii-armored) ---------------------------

    def _read_payload_blocks(self, header: FileHeader, lo: int, hi: int) -> bytes:
        """Ciphertext for block indices [lo, hi); blocks must exist on disk."""
        if hi <= lo:
            return b""
        if header.ascii_armored:
            cipher = self._load_ascii_payload(header)
            return cipher[lo * BLOCK_SIZE : hi * BLOCK_SIZE]
        return self._pread(HEADER_SIZE + lo * BLOCK_SIZE, (hi - lo) * BLOCK_SIZE)

    def _load_ascii_payload(self, header: FileHeader) -> bytes:
        from .names import decode_component  # local import avoids a cycle

        size = os.fstat(self._fd).st_size
        text = self._pread(HEADER_SIZE, size - HEADER_SIZE)
        try:
            cipher = decode_component(text.decode("ascii"))
        except (UnicodeDecodeError, InvalidEncoding) as exc:
            raise CorruptHeader("ascii payload not decodable") from exc
        if len(cipher) != header.payload_blocks * BLOCK_SIZE:
            raise CorruptHeader("ascii payload length mismatch")
        return cipher

    def _store_blocks(self, header: FileHeader, lo: int, cipher: bytes,
                      new_total_blocks: int) -> None:
        if header.ascii_armored:
            from .names import encode_component

            old = b""
            if header.payload_blocks:
                old = self._load_ascii_payload(header)
            full = bytearray(new_total_blocks * BLOCK_SIZE)
            full[: len(old)] = old
            full[lo * BLOCK_SIZE : lo * BLOCK_SIZE + len(cipher)] = cipher
            text = encode_component(bytes(full)).encode("ascii")
            self._pwrite(text, HEADER_SIZE)
            try:
                os.ftruncate(self._fd, HEADER_SIZE + len(text))
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
        else:
            self._pwrite(cipher, HEADER_SIZE + lo * BLOCK_SIZE)

    # -- the byte-granular contract -----------------------------------------

    def write_range(self, offset: int, data: bytes) -> int:
        """Write ``data`` at cleartext ``offset``; returns bytes written.

        Read-modify-write at block granularity: partial first/last blocks are
        merged with existing plaintext, any gap past the old end is zero
        filled, and the header length grows to cover the write.
        """
        if offset < 0 or offset + len(data) >= 2**63:
            raise ValueError("write range out of bounds")
        header = self._read_or_init_header()
        if not data:
            return 0
        old_len = header.plaintext_length
        old_blocks = _blocks_for(old_len)
        end = offset + len(data)

        first = offset // BLOCK_SIZE
        last = _blocks_for(end)
        lo = min(first, old_blocks)
        # Blocks already on disk that overlap the rewrite window.
        ex_hi = min(last, old_blocks)

        buf = bytearray((last - lo) * BLOCK_SIZE)
        if ex_hi > lo:
            cipher = self._read_payload_blocks(header, lo, ex_hi)
            if len(cipher) != (ex_hi - lo) * BLOCK_SIZE:
                raise CorruptHeader("payload shorter than header claims")
            buf[: (ex_hi - lo) * BLOCK_SIZE] = open_range(
                lo, cipher, self._mask, header.iv, self._keys.k2
            )
        rel = offset - lo * BLOCK_SIZE
        buf[rel : rel + len(data)] = data

        sealed = seal_range(lo, bytes(buf), self._mask, header.iv, self._keys.k2)
        new_len = max(old_len, end)
        self._store_blocks(header, lo, sealed, _blocks_for(new_len))
        if new_len != old_len:
            self._write_header(FileHeader(header.version, header.flags, new_len, header.iv))
        return len(data)

    def read_range(self, offset: int, count: int) -> bytes:
        """Read up to ``count`` cleartext bytes at ``offset``; b"" past EOF."""
        if offset < 0 or count < 0:
            raise ValueError("negative offset or count")
        header = self.read_header()
        length = header.plaintext_length
        if offset >= length or count == 0:
            return b""
        count = min(count, length - offset)
        first = offset // BLOCK_SIZE
        last = _blocks_for(offset + count)
        cipher = self._read_payload_blocks(header, first, last)
        if len(cipher) != (last - first) * BLOCK_SIZE:
            raise CorruptHeader("payload shorter than header claims")
        plain = open_range(first, cipher, self._mask, header.iv, self._keys.k2)
        rel = offset - first * BLOCK_SIZE
        return plain[rel : rel + count]

    def plaintext_length(self) -> int:
        return self.read_header().plaintext_length
