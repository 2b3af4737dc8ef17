"""Length-prefixed frame codec.

    uint32 LE length | msg_type (1 byte) | version (1 byte, 0x01) | UTF-8 JSON body

``length`` counts the payload (type + version + body). Bodies are encoded
canonically (sorted keys, no whitespace) so a message has one encoding.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import BadVersion, Oversize, TruncatedFrame, UnknownType
from .model import canonical_json

VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024
CHUNK_SIZE = 64 * 1024
_LEN = struct.Struct("<I")


class MsgType(IntEnum):
    REGISTER = 1
    HEARTBEAT = 2
    QUERY_REQUEST = 3
    SUBQUERY_REQUEST = 4
    SUBQUERY_RESULT = 5
    QUERY_RESULT = 6
    JOB_SUBMIT = 7
    JOB_STATUS = 8
    JOB_RESULT = 9
    ANNOTATION_PUSH = 10
    SECOND_OPINION_REQUEST = 11
    FETCH_IMAGE = 12
    IMAGE_CHUNK = 13
    INGEST = 14
    ERROR = 255


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    body: dict

    @property
    def terminal(self) -> bool:
        """Whether this message ends a reply stream."""
        return not (self.msg_type == MsgType.IMAGE_CHUNK and not self.body.get("last", True))


def encode_frame(msg: Message) -> bytes:
    payload = bytes((int(msg.msg_type), VERSION)) + canonical_json(msg.body).encode("utf-8")
    if len(payload) > MAX_PAYLOAD:
        raise Oversize(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return _LEN.pack(len(payload)) + payload


def frame_length(prefix: bytes) -> int:
    """Validate a 4-byte length prefix before anything is allocated."""
    if len(prefix) < 4:
        raise TruncatedFrame(f"need 4 length bytes, have {len(prefix)}")
    (n,) = _LEN.unpack_from(prefix)
    if n > MAX_PAYLOAD:
        raise Oversize(f"declared payload of {n} bytes exceeds {MAX_PAYLOAD}")
    if n < 2:
        raise TruncatedFrame(f"payload of {n} bytes has no header")
    return n


def decode_payload(payload: bytes) -> Message:
    if len(payload) < 2:
        raise TruncatedFrame("payload has no header")
    code, version = payload[0], payload[1]
    if version != VERSION:
        raise BadVersion(f"frame version {version}")
    try:
        msg_type = MsgType(code)
    except ValueError:
        raise UnknownType(f"message type {code}") from None
    try:
        body = json.loads(payload[2:].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise TruncatedFrame(f"undecodable body: {exc}") from None
    if not isinstance(body, dict):
        raise TruncatedFrame("body is not a JSON object")
    return Message(msg_type, body)


def decode_frame(data: bytes) -> Message:
    n = frame_length(data[:4])
    if len(data) < 4 + n:
        raise TruncatedFrame(f"declared {n} payload bytes, have {len(data) - 4}")
    if len(data) > 4 + n:
        raise TruncatedFrame(f"{len(data) - 4 - n} trailing bytes after frame")
    return decode_payload(data[4:])


def split_frames(data: bytes) -> list[bytes]:
    """Split a captured byte stream into raw frames."""
    out, pos = [], 0
    while pos < len(data):
        n = frame_length(data[pos:pos + 4])
        out.append(data[pos:pos + 4 + n])
        pos += 4 + n
    return out


def read_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise TruncatedFrame(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock) -> tuple[bytes, Message]:
    """Read one frame. Returns the raw bytes too, for counting and capture.

    Raises EOFError on a clean close between frames. Unknown types and bad
    versions raise after the whole frame is consumed, so the stream stays
    in sync.
    """
    first = sock.recv(4)
    if not first:
        raise EOFError
    prefix = first + (read_exact(sock, 4 - len(first)) if len(first) < 4 else b"")
    n = frame_length(prefix)
    payload = read_exact(sock, n)
    return prefix + payload, decode_payload(payload)


@dataclass
class ByteCounters:
    frames: dict[int, int] = field(default_factory=dict)
    payload_bytes: dict[int, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def count(self, msg_type: int, payload_len: int) -> None:
        with self._lock:
            self.frames[int(msg_type)] = self.frames.get(int(msg_type), 0) + 1
            self.payload_bytes[int(msg_type)] = self.payload_bytes.get(int(msg_type), 0) + payload_len

    def frames_of(self, msg_type: int) -> int:
        return self.frames.get(int(msg_type), 0)

    def total_bytes(self) -> int:
        return sum(self.payload_bytes.values())

    def reset(self) -> None:
        with self._lock:
            self.frames.clear()
            self.payload_bytes.clear()

    def snapshot(self) -> dict:
        with self._lock:
            return {
                str(MsgType(t).name): {"frames": self.frames[t], "payload_bytes": self.payload_bytes[t]}
                for t in sorted(self.frames)
            }
