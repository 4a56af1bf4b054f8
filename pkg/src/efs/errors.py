"""Exception hierarchy shared across the gateway.

Every error that can cross the daemon boundary maps onto exactly one wire
status code (see ``efs.wire``); errors raised purely inside the library keep
their specific type so callers can branch on them.
"""


class EfsError(Exception):
    """Base class for all gateway errors."""


class PassphraseTooShort(EfsError):
    """Passphrase shorter than the 16-byte minimum."""


class CorruptHeader(EfsError):
    """File header missing, truncated, or carrying a bad magic/version."""


class IoFailure(EfsError):
    """Backing-store operation failed."""


class EmptyName(EfsError):
    """Zero-length name or link target."""


class NameTooLong(EfsError):
    """Name or link target exceeds the cleartext length budget."""


class InvalidName(EfsError):
    """Name contains forbidden bytes ('/', NUL) or is '.' / '..'."""


class InvalidEncoding(EfsError):
    """Text is not a canonical encoding over the filename-safe alphabet."""


class NotAnEfsName(EfsError):
    """Directory entry does not look like an encrypted name at all."""


class ChecksumMismatch(EfsError):
    """Decrypted record failed its embedded checksum: wrong key or foreign entry."""


class BadKey(EfsError):
    """Passphrase failed the directory validator check."""


class NotAnEfsDirectory(EfsError):
    """Backing directory carries no validator file."""


class Exists(EfsError):
    """Entry or attach name already exists."""


class NoEntry(EfsError):
    """No such entry, attach, or backing path."""


class AccessDenied(EfsError):
    """Caller is not the owner of the attach."""


class StaleHandle(EfsError):
    """Handle does not resolve to a live file (forged, detached, or removed)."""


class NotDirectory(EfsError):
    """Directory operation on a non-directory handle."""


class IsDirectory(EfsError):
    """File operation on a directory handle."""


class NotEmpty(EfsError):
    """Directory removal on a non-empty directory."""


class CrossAttach(EfsError):
    """Rename across two different attaches."""


class BadMessage(EfsError):
    """Byte stream is not a valid protocol frame."""
