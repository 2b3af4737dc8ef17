"""Exception hierarchy shared by every layer.

Each error class has a stable ``code`` (its class name) so that an error
raised on a remote Grid-box can be carried in an Error frame and re-raised
with the same type by the caller.
"""

from __future__ import annotations


class MgvoError(Exception):
    """Base class; ``code`` travels on the wire."""

    @property
    def code(self) -> str:
        return type(self).__name__


# ingest / MGIF
class BadMagic(MgvoError):
    pass


class UnsupportedVersion(MgvoError):
    pass


class MissingKey(MgvoError):
    pass


class MalformedHeader(MgvoError):
    pass


class PixelSizeMismatch(MgvoError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"pixel blob has {actual} bytes, header implies {expected}")
        self.expected = expected
        self.actual = actual


class InvalidCase(MgvoError):
    pass


class DomainError(MgvoError):
    pass


class StorageError(MgvoError):
    pass


# catalogue / store
class NotFound(MgvoError):
    pass


class LfnConflict(MgvoError):
    pass


class InvalidLfn(MgvoError):
    pass


class NoLocalReplica(MgvoError):
    pass


class ChecksumMismatch(MgvoError):
    pass


# security
class AuthFailed(MgvoError):
    pass


class SignatureInvalid(AuthFailed):
    pass


class Expired(AuthFailed):
    pass


class MalformedToken(AuthFailed):
    pass


class Denied(MgvoError):
    pass


# query
class QuerySyntaxError(MgvoError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownField(MgvoError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name


class TypeMismatch(MgvoError):
    def __init__(self, field: str, detail: str = ""):
        super().__init__(f"{field}: {detail}" if detail else field)
        self.field = field


class NoNodesAvailable(MgvoError):
    pass


# analysis
class UnknownAlgorithm(MgvoError):
    pass


class UnknownParam(MgvoError):
    pass


class ImageTooSmall(MgvoError):
    pass


class UnplacedImage(MgvoError):
    def __init__(self, guid: str):
        super().__init__(f"no live node holds a replica of {guid}")
        self.guid = guid


class InvalidTransition(MgvoError):
    pass


# collaboration
class SameSite(MgvoError):
    pass


class DuplicateAuthor(MgvoError):
    pass


class CaseClosed(MgvoError):
    pass


class NotReady(MgvoError):
    pass


class InvalidAnnotation(MgvoError):
    pass


# wire / federation
class FrameError(MgvoError):
    pass


class Oversize(FrameError):
    pass


class UnknownType(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class BadVersion(FrameError):
    pass


class NodeTimeout(MgvoError):
    pass


class DuplicateNodeId(MgvoError):
    pass


class RemoteError(MgvoError):
    """Error frame whose code has no local class."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.remote_code = code

    @property
    def code(self) -> str:
        return self.remote_code


# config
class ConfigError(MgvoError):
    pass


class UnreadableFile(ConfigError):
    pass


class RegistrationFailed(MgvoError):
    pass


def _all_subclasses(cls):
    for sub in cls.__subclasses__():
        yield sub
        yield from _all_subclasses(sub)


def from_wire(code: str, message: str) -> MgvoError:
    """Rebuild an exception from an Error frame body."""
    for cls in _all_subclasses(MgvoError):
        if cls.__name__ == code and cls is not RemoteError:
            exc = cls.__new__(cls)
            Exception.__init__(exc, message)
            return exc
    return RemoteError(code, message)
