"""The file-service daemon: attach points, handles, and translated file ops.

Every request names its file by an opaque 32-byte handle: 8 bytes of attach
id plus a 24-byte keyed-hash tag over the encrypted relative path, keyed by a
secret drawn fresh at attach time.  Handles are derivable but unforgeable,
and the handle table is only a reverse-lookup cache: losing it (daemon
restart) costs stale-handle errors, never data.  The backing directory holds
nothing but encrypted names, encrypted contents, and the validator file.
"""

from __future__ import annotations

import errno
import hashlib
import hmac
import itertools
import os
import stat as stat_mod
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

from . import names as codec
from .crypto import (
    DEFAULT_KDF_ITERATIONS,
    DEFAULT_MASK_BLOCKS,
    EncryptedFile,
    MaskStream,
    SubKeyPair,
    derive_subkeys,
    generate_mask,
)
from .errors import (
    AccessDenied,
    BadKey,
    ChecksumMismatch,
    CrossAttach,
    Exists,
    InvalidName,
    IoFailure,
    IsDirectory,
    NoEntry,
    NotAnEfsDirectory,
    NotAnEfsName,
    NotDirectory,
    NotEmpty,
    StaleHandle,
)
from .wire import KIND_DIR, KIND_FILE, KIND_SYMLINK, Attributes, HANDLE_SIZE

VALIDATOR_NAME = "=efs-validator="
VALIDATOR_PLAINTEXT = b"EFS-VALIDATOR-MAGIC-0123456789AB"

# Attach id 0 is reserved for the daemon's virtual root directory.
VIRTUAL_ROOT_HANDLE = b"\x00" * HANDLE_SIZE

TAG_SIZE = 24
READDIR_PAGE_SIZE = 256
DEFAULT_CACHE_CAPACITY = 16


def create_encrypted_directory(path, passphrase, *,
                               kdf_iterations: int = DEFAULT_KDF_ITERATIONS,
                               mask_blocks: int = DEFAULT_MASK_BLOCKS,
                               dir_mode: int = 0o700) -> None:
    """Initialize a backing directory: create it (or accept an empty one) and
    write the validator file that attach uses to check the passphrase.

    Fails without leaving partial state behind.
    """
    keys = derive_subkeys(passphrase, kdf_iterations)
    mask = generate_mask(keys.k1, mask_blocks)
    p = Path(path)
    created = False
    if p.exists():
        if not p.is_dir():
            raise Exists(f"{p} exists and is not a directory")
        if any(p.iterdir()):
            raise Exists(f"{p} is not empty")
    else:
        p.mkdir(mode=dir_mode)
        created = True
    validator = p / VALIDATOR_NAME
    try:
        with EncryptedFile.create(validator, keys, mask) as ef:
            ef.write_range(0, VALIDATOR_PLAINTEXT)
    except BaseException:
        validator.unlink(missing_ok=True)
        if created:
            p.rmdir()
        raise


def _verify_validator(backing_dir: str, keys: SubKeyPair, mask: MaskStream) -> None:
    path = os.path.join(backing_dir, VALIDATOR_NAME)
    if not os.path.isfile(path):
        raise NotAnEfsDirectory(f"no validator file in {backing_dir}")
    try:
        with EncryptedFile.open_path(path, keys, mask, writable=False) as ef:
            got = ef.read_range(0, len(VALIDATOR_PLAINTEXT) + 1)
    except Exception as exc:  # damaged validator counts as not-an-efs-dir
        raise NotAnEfsDirectory(f"unreadable validator in {backing_dir}") from exc
    if got != VALIDATOR_PLAINTEXT:
        raise BadKey("incorrect key")


@dataclass
class AttachPoint:
    """A live binding of a backing directory to a virtual name.

    The secret exists only in memory and is never serialized anywhere.
    """

    attach_id: int
    name: str
    backing_dir: str
    owner: int
    obscure: bool
    secret: bytes
    keys: SubKeyPair
    mask: MaskStream


class _CacheEntry:
    __slots__ = ("ef", "refs", "cached")

    def __init__(self, ef: EncryptedFile, cached: bool):
        self.ef = ef
        self.refs = 1
        self.cached = cached


class OpenFileCache:
    """LRU cache of open encrypted-file references.

    Entries in use are refcounted and never closed underfoot; with capacity 0
    every checkout opens fresh and every checkin closes, so behaviour is
    byte-identical either way.
    """

    def __init__(self, capacity: int = DEFAULT_CACHE_CAPACITY):
        self.capacity = capacity
        self._lock = threading.Lock()
        self._entries: OrderedDict[bytes, _CacheEntry] = OrderedDict()

    def checkout(self, handle: bytes, opener) -> _CacheEntry:
        with self._lock:
            ent = self._entries.get(handle)
            if ent is not None:
                ent.refs += 1
                self._entries.move_to_end(handle)
                return ent
            ent = _CacheEntry(opener(), cached=self.capacity > 0)
            if ent.cached:
                self._entries[handle] = ent
                self._trim_locked()
            return ent

    def checkin(self, handle: bytes, ent: _CacheEntry) -> None:
        with self._lock:
            ent.refs -= 1
            still_cached = self._entries.get(handle) is ent
            if ent.refs == 0 and not still_cached:
                ent.ef.close()

    def evict(self, handle: bytes) -> None:
        with self._lock:
            ent = self._entries.pop(handle, None)
            if ent is not None and ent.refs == 0:
                ent.ef.close()
            # busy entries are closed by their final checkin

    def evict_attach(self, attach_id: int) -> None:
        prefix = struct.pack(">Q", attach_id)
        with self._lock:
            victims = [h for h in self._entries if h.startswith(prefix)]
            for h in victims:
                ent = self._entries.pop(h)
                if ent.refs == 0:
                    ent.ef.close()

    def clear(self) -> None:
        with self._lock:
            for ent in self._entries.values():
                if ent.refs == 0:
                    ent.ef.close()
            self._entries.clear()

    def _trim_locked(self) -> None:
        while len(self._entries) > self.capacity:
            victim = next((h for h, e in self._entries.items() if e.refs == 0), None)
            if victim is None:
                break  # everything busy; shrink again on later checkins
            self._entries.pop(victim).ef.close()


class EfsDaemon:
    """Stateless-per-request file service over encrypted backing directories.

    Handle tables and the open-file cache are rebuildable caches; after a
    restart a re-attach plus a walk from the new root handle reaches every
    file, and old handles answer StaleHandle.
    """

    def __init__(self, *, mask_blocks: int = DEFAULT_MASK_BLOCKS,
                 cache_capacity: int = DEFAULT_CACHE_CAPACITY,
                 kdf_iterations: int = DEFAULT_KDF_ITERATIONS):
        self.mask_blocks = mask_blocks
        self.kdf_iterations = kdf_iterations
        self._lock = threading.RLock()
        self._by_name: dict[str, AttachPoint] = {}
        self._by_id: dict[int, AttachPoint] = {}
        self._tables: dict[int, dict[bytes, str]] = {}
        self._ids = itertools.count(1)
        self._cache = OpenFileCache(cache_capacity)
        self._path_locks: dict[str, threading.Lock] = {}
        self._path_locks_guard = threading.Lock()

    # -- handles -------------------------------------------------------------

    def _handle_bytes(self, ap: AttachPoint, enc_rel: str) -> bytes:
        tag = hmac.new(ap.secret, enc_rel.encode("ascii"), hashlib.sha256).digest()
        return struct.pack(">Q", ap.attach_id) + tag[:TAG_SIZE]

    def _register_handle(self, ap: AttachPoint, enc_rel: str) -> bytes:
        handle = self._handle_bytes(ap, enc_rel)
        with self._lock:
            table = self._tables.get(ap.attach_id)
            if table is not None:
                table[handle] = enc_rel
        return handle

    def _resolve(self, handle: bytes, caller: int) -> tuple[AttachPoint, str]:
        if not isinstance(handle, (bytes, bytearray)) or len(handle) != HANDLE_SIZE:
            raise StaleHandle("malformed handle")
        attach_id = struct.unpack(">Q", bytes(handle[:8]))[0]
        with self._lock:
            ap = self._by_id.get(attach_id)
            if ap is None:
                raise StaleHandle("no such attach")
            if caller != ap.owner:
                raise AccessDenied("not the attach owner")
            enc_rel = self._tables[attach_id].get(bytes(handle))
        if enc_rel is None:
            raise StaleHandle("unknown handle")
        return ap, enc_rel

    def _backing(self, ap: AttachPoint, enc_rel: str) -> str:
        if not enc_rel:
            return ap.backing_dir
        return os.path.join(ap.backing_dir, *enc_rel.split("/"))

    def _path_lock(self, ap: AttachPoint, enc_rel: str) -> threading.Lock:
        key = f"{ap.backing_dir}\x00{enc_rel}"
        with self._path_locks_guard:
            lock = self._path_locks.get(key)
            if lock is None:
                lock = self._path_locks[key] = threading.Lock()
            return lock

    # -- attach lifecycle ------------------------------------------------------

    def attach(self, backing_dir, attach_name: str, passphrase, obscure: bool,
               caller: int) -> bytes:
        """Bind a backing directory under ``attach_name``; returns the root handle."""
        self._check_attach_name(attach_name)
        backing = os.path.realpath(os.fspath(backing_dir))
        if not os.path.isdir(backing):
            raise NotAnEfsDirectory(f"{backing} is not a directory")
        if not os.access(backing, os.R_OK | os.W_OK | os.X_OK):
            raise AccessDenied(f"insufficient permission on {backing}")
        with self._lock:
            if attach_name in self._by_name:
                raise Exists(f"attach name {attach_name!r} in use")
        keys = derive_subkeys(passphrase, self.kdf_iterations)
        mask = generate_mask(keys.k1, self.mask_blocks)
        _verify_validator(backing, keys, mask)
        with self._lock:
            if attach_name in self._by_name:
                raise Exists(f"attach name {attach_name!r} in use")
            ap = AttachPoint(
                attach_id=next(self._ids),
                name=attach_name,
                backing_dir=backing,
                owner=caller,
                obscure=obscure,
                secret=os.urandom(16),
                keys=keys,
                mask=mask,
            )
            self._by_name[attach_name] = ap
            self._by_id[ap.attach_id] = ap
            self._tables[ap.attach_id] = {}
        return self._register_handle(ap, "")

    def detach(self, attach_name: str, caller: int) -> None:
        """Drop an attach; its key material is released and handles go stale."""
        with self._lock:
            ap = self._by_name.get(attach_name)
            if ap is None:
                raise NoEntry(f"no attach named {attach_name!r}")
            if ap.owner != caller:
                raise AccessDenied("not the attach owner")
            del self._by_name[attach_name]
            del self._by_id[ap.attach_id]
            self._tables.pop(ap.attach_id, None)
        self._cache.evict_attach(ap.attach_id)
        # best effort at erasure; the objects become unreachable here
        ap.keys = None  # type: ignore[assignment]
        ap.mask = None  # type: ignore[assignment]
        ap.secret = b""

    def list_attaches(self, caller: int) -> list[str]:
        """Attach names visible to the caller: own plus others' non-obscure."""
        with self._lock:
            return sorted(
                ap.name for ap in self._by_name.values()
                if ap.owner == caller or not ap.obscure
            )

    @staticmethod
    def _check_attach_name(name: str) -> None:
        if not isinstance(name, str) or not name or "/" in name or "\x00" in name \
                or name in (".", ".."):
            raise InvalidName(f"bad attach name {name!r}")

    # -- common op plumbing ----------------------------------------------------

    def _lstat(self, path: str, missing_exc) -> os.stat_result:
        try:
            return os.lstat(path)
        except FileNotFoundError:
            raise missing_exc from None
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def _attrs(self, ap: AttachPoint, path: str, st: os.stat_result) -> Attributes:
        if stat_mod.S_ISDIR(st.st_mode):
            kind, size = KIND_DIR, st.st_size
        elif stat_mod.S_ISLNK(st.st_mode):
            kind, size = KIND_SYMLINK, st.st_size
        elif stat_mod.S_ISREG(st.st_mode):
            kind = KIND_FILE
            with EncryptedFile.open_path(path, ap.keys, ap.mask, writable=False) as ef:
                size = ef.read_header().plaintext_length
        else:
            raise IoFailure("unsupported file type in backing directory")
        return Attributes(
            kind=kind,
            size=size,
            mtime_ns=st.st_mtime_ns,
            atime_ns=st.st_atime_ns,
            ctime_ns=st.st_ctime_ns,
            mode=stat_mod.S_IMODE(st.st_mode),
        )

    def _resolve_dir(self, handle: bytes, caller: int) -> tuple[AttachPoint, str, str]:
        if bytes(handle) == VIRTUAL_ROOT_HANDLE:
            # attach/detach are the only ways to change the virtual root
            raise AccessDenied("virtual root entries are managed by attach")
        ap, enc_rel = self._resolve(handle, caller)
        path = self._backing(ap, enc_rel)
        st = self._lstat(path, StaleHandle("backing path gone"))
        if not stat_mod.S_ISDIR(st.st_mode):
            raise NotDirectory("not a directory handle")
        return ap, enc_rel, path

    def _sealed_child(self, ap: AttachPoint, enc_rel: str, name: bytes) -> tuple[str, str]:
        sealed = codec.seal_name(bytes(name), ap.keys, ap.mask)
        child_rel = f"{enc_rel}/{sealed}" if enc_rel else sealed
        return child_rel, self._backing(ap, child_rel)

    def _open_encrypted(self, path: str, ap: AttachPoint) -> EncryptedFile:
        try:
            return EncryptedFile.open_path(path, ap.keys, ap.mask, writable=True)
        except IoFailure:
            return EncryptedFile.open_path(path, ap.keys, ap.mask, writable=False)

    # -- namespace operations ----------------------------------------------------

    def lookup(self, dir_handle: bytes, name: bytes, caller: int) -> tuple[bytes, Attributes]:
        """Resolve one cleartext component inside a directory handle."""
        if bytes(dir_handle) == VIRTUAL_ROOT_HANDLE:
            return self._lookup_attach(bytes(name), caller)
        ap, enc_rel, path = self._resolve_dir(dir_handle, caller)
        name = bytes(name)
        if name == b".":
            st = self._lstat(path, StaleHandle("backing path gone"))
            return self._register_handle(ap, enc_rel), self._attrs(ap, path, st)
        if name == b"..":
            parent_rel = enc_rel.rsplit("/", 1)[0] if "/" in enc_rel else ""
            parent_path = self._backing(ap, parent_rel)
            st = self._lstat(parent_path, StaleHandle("backing path gone"))
            return self._register_handle(ap, parent_rel), self._attrs(ap, parent_path, st)
        child_rel, child_path = self._sealed_child(ap, enc_rel, name)
        st = self._lstat(child_path, NoEntry(f"no entry {name!r}"))
        return self._register_handle(ap, child_rel), self._attrs(ap, child_path, st)

    def _lookup_attach(self, name: bytes, caller: int) -> tuple[bytes, Attributes]:
        try:
            attach_name = name.decode("utf-8")
        except UnicodeDecodeError:
            raise NoEntry("no such attach") from None
        if attach_name in (".", ".."):
            return VIRTUAL_ROOT_HANDLE, _virtual_root_attrs()
        with self._lock:
            ap = self._by_name.get(attach_name)
        if ap is None:
            raise NoEntry(f"no attach named {attach_name!r}")
        if ap.owner != caller:
            raise AccessDenied("not the attach owner")
        st = self._lstat(ap.backing_dir, StaleHandle("backing directory gone"))
        return self._register_handle(ap, ""), self._attrs(ap, ap.backing_dir, st)

    def getattr(self, handle: bytes, caller: int) -> Attributes:
        """Attributes for a handle; file sizes are cleartext lengths."""
        if bytes(handle) == VIRTUAL_ROOT_HANDLE:
            return _virtual_root_attrs()
        ap, enc_rel = self._resolve(handle, caller)
        path = self._backing(ap, enc_rel)
        st = self._lstat(path, StaleHandle("backing path gone"))
        return self._attrs(ap, path, st)

    def read(self, handle: bytes, offset: int, count: int, caller: int) -> bytes:
        ap, enc_rel, path = self._resolve_file(handle, caller)
        with self._path_lock(ap, enc_rel):
            self._ensure_regular(path)
            ent = self._cache.checkout(bytes(handle), lambda: self._open_encrypted(path, ap))
            try:
                return ent.ef.read_range(offset, count)
            finally:
                self._cache.checkin(bytes(handle), ent)

    def write(self, handle: bytes, offset: int, data: bytes, caller: int) -> int:
        ap, enc_rel, path = self._resolve_file(handle, caller)
        with self._path_lock(ap, enc_rel):
            self._ensure_regular(path)
            ent = self._cache.checkout(bytes(handle), lambda: self._open_encrypted(path, ap))
            try:
                return ent.ef.write_range(offset, data)
            finally:
                self._cache.checkin(bytes(handle), ent)

    def _resolve_file(self, handle: bytes, caller: int) -> tuple[AttachPoint, str, str]:
        if bytes(handle) == VIRTUAL_ROOT_HANDLE:
            raise IsDirectory("virtual root is a directory")
        ap, enc_rel = self._resolve(handle, caller)
        if not enc_rel:
            raise IsDirectory("attach root is a directory")
        return ap, enc_rel, self._backing(ap, enc_rel)

    def _ensure_regular(self, path: str) -> None:
        st = self._lstat(path, StaleHandle("backing path gone"))
        if stat_mod.S_ISDIR(st.st_mode):
            raise IsDirectory("handle names a directory")
        if not stat_mod.S_ISREG(st.st_mode):
            raise IoFailure("handle names a non-regular file")

    def create(self, dir_handle: bytes, name: bytes, mode: int, caller: int) -> bytes:
        """Create an empty encrypted file (fresh header, fresh IV)."""
        ap, enc_rel, _ = self._resolve_dir(dir_handle, caller)
        self._reject_dots(name)
        child_rel, child_path = self._sealed_child(ap, enc_rel, name)
        with self._path_lock(ap, child_rel):
            if os.path.lexists(child_path):
                raise Exists(f"entry {bytes(name)!r} exists")
            EncryptedFile.create(child_path, ap.keys, ap.mask,
                                 mode=stat_mod.S_IMODE(mode) or 0o600).close()
        return self._register_handle(ap, child_rel)

    def mkdir(self, dir_handle: bytes, name: bytes, mode: int, caller: int) -> bytes:
        ap, enc_rel, _ = self._resolve_dir(dir_handle, caller)
        self._reject_dots(name)
        child_rel, child_path = self._sealed_child(ap, enc_rel, name)
        try:
            os.mkdir(child_path, stat_mod.S_IMODE(mode) or 0o700)
        except FileExistsError:
            raise Exists(f"entry {bytes(name)!r} exists") from None
        except FileNotFoundError:
            raise StaleHandle("backing path gone") from None
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        return self._register_handle(ap, child_rel)

    def remove_entry(self, dir_handle: bytes, name: bytes, caller: int) -> None:
        """Remove a file or an empty directory."""
        ap, enc_rel, _ = self._resolve_dir(dir_handle, caller)
        self._reject_dots(name)
        child_rel, child_path = self._sealed_child(ap, enc_rel, name)
        child_handle = self._handle_bytes(ap, child_rel)
        with self._path_lock(ap, child_rel):
            st = self._lstat(child_path, NoEntry(f"no entry {bytes(name)!r}"))
            try:
                if stat_mod.S_ISDIR(st.st_mode):
                    os.rmdir(child_path)
                else:
                    os.unlink(child_path)
            except OSError as exc:
                if exc.errno in (errno.ENOTEMPTY, errno.EEXIST):
                    raise NotEmpty("directory not empty") from None
                if isinstance(exc, FileNotFoundError):
                    raise NoEntry(f"no entry {bytes(name)!r}") from None
                raise IoFailure(str(exc)) from exc
            self._cache.evict(child_handle)
        with self._lock:
            table = self._tables.get(ap.attach_id)
            if table is not None:
                table.pop(child_handle, None)

    def rename_entry(self, src_dir_handle: bytes, src_name: bytes,
                     dst_dir_handle: bytes, dst_name: bytes, caller: int) -> None:
        """Rename within one attach; an existing regular-file target is replaced."""
        src_ap, src_rel, _ = self._resolve_dir(src_dir_handle, caller)
        dst_ap, dst_rel, _ = self._resolve_dir(dst_dir_handle, caller)
        if src_ap.attach_id != dst_ap.attach_id:
            raise CrossAttach("rename across attaches")
        self._reject_dots(src_name)
        self._reject_dots(dst_name)
        src_child_rel, src_path = self._sealed_child(src_ap, src_rel, src_name)
        dst_child_rel, dst_path = self._sealed_child(dst_ap, dst_rel, dst_name)
        locks = sorted({src_child_rel, dst_child_rel})
        held = [self._path_lock(src_ap, rel) for rel in locks]
        for lk in held:
            lk.acquire()
        try:
            self._lstat(src_path, NoEntry(f"no entry {bytes(src_name)!r}"))
            try:
                dst_st = os.lstat(dst_path)
                if stat_mod.S_ISDIR(dst_st.st_mode):
                    raise IsDirectory("rename target is a directory")
            except FileNotFoundError:
                pass
            try:
                os.rename(src_path, dst_path)
            except FileNotFoundError:
                raise NoEntry(f"no entry {bytes(src_name)!r}") from None
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
            self._cache.evict(self._handle_bytes(src_ap, src_child_rel))
            self._cache.evict(self._handle_bytes(dst_ap, dst_child_rel))
        finally:
            for lk in reversed(held):
                lk.release()

    def readdir(self, dir_handle: bytes, cursor: str, caller: int
                ) -> tuple[list[tuple[bytes, int]], str]:
        """One page of decrypted directory entries plus a resume cursor.

        Entries whose names fail to decrypt (foreign files, other keys) are
        skipped; '.' and '..' lead the first page; '' cursor means start and
        an empty returned cursor means done.
        """
        if bytes(dir_handle) == VIRTUAL_ROOT_HANDLE:
            return self._readdir_virtual_root(cursor, caller)
        ap, enc_rel, path = self._resolve_dir(dir_handle, caller)
        rows: list[tuple[str, bytes, int]] = []
        try:
            with os.scandir(path) as it:
                for entry in it:
                    if entry.name == VALIDATOR_NAME:
                        continue
                    try:
                        clear = codec.open_name(entry.name, ap.keys, ap.mask)
                    except (NotAnEfsName, ChecksumMismatch):
                        continue
                    try:
                        if entry.is_symlink():
                            kind = KIND_SYMLINK
                        elif entry.is_dir(follow_symlinks=False):
                            kind = KIND_DIR
                        elif entry.is_file(follow_symlinks=False):
                            kind = KIND_FILE
                        else:
                            continue
                    except OSError:
                        continue
                    rows.append((entry.name, clear, kind))
        except FileNotFoundError:
            raise StaleHandle("backing path gone") from None
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        rows.sort(key=lambda r: r[0])
        start = 0
        if cursor:
            start = _first_index_after(rows, cursor)
        page = rows[start : start + READDIR_PAGE_SIZE]
        out: list[tuple[bytes, int]] = []
        if not cursor:
            out.extend([(b".", KIND_DIR), (b"..", KIND_DIR)])
        out.extend((clear, kind) for _, clear, kind in page)
        more = start + READDIR_PAGE_SIZE < len(rows)
        next_cursor = page[-1][0] if (more and page) else ""
        return out, next_cursor

    def _readdir_virtual_root(self, cursor: str, caller: int
                              ) -> tuple[list[tuple[bytes, int]], str]:
        visible = self.list_attaches(caller)
        rows = [(name, name.encode("utf-8"), KIND_DIR) for name in visible]
        start = _first_index_after(rows, cursor) if cursor else 0
        page = rows[start : start + READDIR_PAGE_SIZE]
        out: list[tuple[bytes, int]] = []
        if not cursor:
            out.extend([(b".", KIND_DIR), (b"..", KIND_DIR)])
        out.extend((raw, kind) for _, raw, kind in page)
        more = start + READDIR_PAGE_SIZE < len(rows)
        next_cursor = page[-1][0] if (more and page) else ""
        return out, next_cursor

    def symlink(self, dir_handle: bytes, name: bytes, target: bytes,
                caller: int) -> bytes:
        """Create a symlink whose stored target is encrypted."""
        ap, enc_rel, _ = self._resolve_dir(dir_handle, caller)
        self._reject_dots(name)
        child_rel, child_path = self._sealed_child(ap, enc_rel, name)
        sealed_target = codec.seal_link_target(bytes(target), ap.keys, ap.mask)
        with self._path_lock(ap, child_rel):
            if os.path.lexists(child_path):
                raise Exists(f"entry {bytes(name)!r} exists")
            try:
                os.symlink(sealed_target, child_path)
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
        return self._register_handle(ap, child_rel)

    def readlink(self, handle: bytes, caller: int) -> bytes:
        ap, enc_rel = self._resolve(handle, caller)
        if not enc_rel:
            raise IoFailure("attach root is not a symlink")
        path = self._backing(ap, enc_rel)
        try:
            stored = os.readlink(path)
        except FileNotFoundError:
            raise StaleHandle("backing path gone") from None
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        try:
            return codec.open_link_target(stored, ap.keys, ap.mask)
        except (NotAnEfsName, ChecksumMismatch) as exc:
            raise IoFailure("stored link target is not decryptable") from exc

    @staticmethod
    def _reject_dots(name: bytes) -> None:
        if bytes(name) in (b".", b".."):
            raise InvalidName("'.' and '..' are reserved")


def _virtual_root_attrs() -> Attributes:
    return Attributes(kind=KIND_DIR, size=0, mtime_ns=0, atime_ns=0,
                      ctime_ns=0, mode=0o755)


def _first_index_after(rows: list, cursor: str) -> int:
    # rows are sorted by their first element (the stored/virtual name)
    lo, hi = 0, len(rows)
    while lo < hi:
        mid = (lo + hi) // 2
        if rows[mid][0] <= cursor:
            lo = mid + 1
        else:
            hi = mid
    return lo
