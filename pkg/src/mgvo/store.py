"""Node-local persistence: append-only record log, content-addressed blobs,
the restricted link map, and the replica-aware file catalogue.

Layout under ``data_dir``::

    meta.log        one canonical JSON record per line
    blobs/<guid>    pixel blobs
    linkmap.log     pseudonym -> original identity (mode 0600)
    catalogue.log   catalogue operations

Every log is replayed at startup. A torn final line (crash mid-append) is
discarded; anything else unparsable is an error.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .errors import (
    ChecksumMismatch,
    InvalidLfn,
    LfnConflict,
    NoLocalReplica,
    NotFound,
    StorageError,
)
from .model import Exam, MammogramImage, PatientRecord, canonical_json, from_record, to_record

log = logging.getLogger(__name__)

LFN_ROOT = "/mgvo/"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def guid_for(data: bytes) -> str:
    return sha256_hex(data)[:32]


def _replay(path: Path, repair: bool = True) -> list[dict]:
    """Read a JSON-lines log, truncating a torn tail in place.

    With ``repair=False`` the tail is skipped but left on disk: a reader
    must not cut a record the writer may still be appending.
    """
    if not path.exists():
        return []
    raw = path.read_bytes()
    records = []
    offset = 0
    lines = raw.split(b"\n")
    for i, line in enumerate(lines):
        last = i == len(lines) - 1
        if last:
            # bytes after the final newline: a torn append, or nothing
            if line and repair:
                log.warning("%s: discarding torn tail of %d bytes", path, len(line))
                with open(path, "r+b") as fh:
                    fh.truncate(offset)
            break
        try:
            records.append(json.loads(line))
        except ValueError:
            raise StorageError(f"{path}: corrupt record at byte {offset}") from None
        offset += len(line) + 1
    return records


class AppendLog:
    """Line-oriented append-only log. The write is flushed before returning."""

    def __init__(self, path: Path, mode: int = 0o644, fsync: bool = False, read_only: bool = False):
        self.path = path
        self.fsync = fsync
        self._fh = None
        if not read_only:
            fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, mode)
            os.chmod(path, mode)
            self._fh = os.fdopen(fd, "ab")

    def append(self, rec: dict) -> None:
        if self._fh is None:
            raise StorageError(f"{self.path} is open read-only")
        self._fh.write(canonical_json(rec).encode("utf-8") + b"\n")
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


# ----------------------------------------------------------------- catalogue


@dataclass
class CatalogueEntry:
    lfn: str
    guid: str
    size: int
    checksum: str
    replicas: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "lfn": self.lfn,
            "guid": self.guid,
            "size": self.size,
            "checksum": self.checksum,
            "replicas": [list(r) for r in self.replicas],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CatalogueEntry":
        return cls(d["lfn"], d["guid"], d["size"], d["checksum"],
                   [tuple(r) for r in d["replicas"]])


def check_lfn(lfn: str) -> None:
    if not isinstance(lfn, str) or not lfn.startswith(LFN_ROOT):
        raise InvalidLfn(f"lfn must live under {LFN_ROOT}: {lfn!r}")
    segments = lfn[1:].split("/")
    if any(s in ("", ".", "..") for s in segments) or len(segments) < 2:
        raise InvalidLfn(f"empty or relative segment in {lfn!r}")


class Catalogue:
    """File catalogue for data held at one node.

    ``blob_path`` maps a guid to the local blob file, used by :meth:`verify`.
    """

    def __init__(self, path: Path, node_id: str, blob_path: Callable[[str], Path],
                 fsync: bool = False, read_only: bool = False):
        self.node_id = node_id
        self._blob_path = blob_path
        self._by_lfn: dict[str, CatalogueEntry] = {}
        self._by_guid: dict[str, CatalogueEntry] = {}
        self._lock = threading.RLock()
        for op in _replay(path, repair=not read_only):
            self._apply(op)
        self._log = AppendLog(path, fsync=fsync, read_only=read_only)

    def _apply(self, op: dict) -> CatalogueEntry:
        if op["op"] == "register":
            entry = CatalogueEntry.from_dict(op["entry"])
            self._by_lfn[entry.lfn] = entry
            self._by_guid[entry.guid] = entry
            return entry
        entry = self._by_guid[op["guid"]]
        rep = (op["node_id"], op["path"])
        if rep not in entry.replicas:
            entry.replicas.append(rep)
        return entry

    def _commit(self, op: dict) -> CatalogueEntry:
        self._log.append(op)
        return self._apply(op)

    def register(self, lfn: str, guid: str, size: int, checksum: str,
                 replica: tuple[str, str]) -> CatalogueEntry:
        check_lfn(lfn)
        if checksum[:32] != guid:
            raise ChecksumMismatch(f"guid {guid} is not derived from checksum {checksum}")
        with self._lock:
            existing = self._by_lfn.get(lfn)
            if existing is not None:
                if existing.guid != guid:
                    raise LfnConflict(f"{lfn} already registered with guid {existing.guid}")
                return self.add_replica(guid, *replica)
            if guid in self._by_guid:
                raise LfnConflict(f"guid {guid} already registered as {self._by_guid[guid].lfn}")
            entry = CatalogueEntry(lfn, guid, size, checksum, [tuple(replica)])
            return self._copy(self._commit({"op": "register", "entry": entry.to_dict()}))

    def lookup(self, lfn: str) -> CatalogueEntry:
        with self._lock:
            try:
                return self._copy(self._by_lfn[lfn])
            except KeyError:
                raise NotFound(lfn) from None

    def by_guid(self, guid: str) -> CatalogueEntry:
        with self._lock:
            try:
                return self._copy(self._by_guid[guid])
            except KeyError:
                raise NotFound(guid) from None

    def whereis(self, guid: str) -> list[tuple[str, str]]:
        return sorted(self.by_guid(guid).replicas)

    def add_replica(self, guid: str, node_id: str, physical_path: str) -> CatalogueEntry:
        with self._lock:
            entry = self._by_guid.get(guid)
            if entry is None:
                raise NotFound(guid)
            if (node_id, physical_path) in entry.replicas:
                return self._copy(entry)
            return self._copy(self._commit(
                {"op": "add_replica", "guid": guid, "node_id": node_id, "path": physical_path}))

    def ls(self, prefix: str) -> list[CatalogueEntry]:
        with self._lock:
            return [self._copy(e) for lfn, e in sorted(self._by_lfn.items()) if lfn.startswith(prefix)]

    def verify(self, guid: str) -> bool:
        """True when the local blob still hashes to the registered checksum."""
        entry = self.by_guid(guid)
        if not any(node == self.node_id for node, _ in entry.replicas):
            raise NoLocalReplica(guid)
        path = self._blob_path(guid)
        if not path.exists():
            return False
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        return h.hexdigest() == entry.checksum

    def entries(self) -> list[CatalogueEntry]:
        return self.ls(LFN_ROOT)

    @staticmethod
    def _copy(entry: CatalogueEntry) -> CatalogueEntry:
        return CatalogueEntry(entry.lfn, entry.guid, entry.size, entry.checksum, list(entry.replicas))

    def close(self) -> None:
        self._log.close()


# --------------------------------------------------------------- local store


class LocalStore:
    """Single-writer, multi-reader persistent store for one Grid-box.

    ``read_only=True`` opens a directory another process may be writing:
    nothing is created, repaired or appended.
    """

    def __init__(self, data_dir, node_id: str, fsync: bool = False, read_only: bool = False):
        self.data_dir = Path(data_dir)
        self.node_id = node_id
        self.read_only = read_only
        self.blob_dir = self.data_dir / "blobs"
        if read_only:
            if not self.data_dir.is_dir():
                raise StorageError(f"no data directory at {self.data_dir}")
        else:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self.blob_dir.mkdir(exist_ok=True)
        self.lock = threading.RLock()
        self.version = 0
        self.cache: dict = {}

        self.patients: dict[tuple[str, str], PatientRecord] = {}
        self.exams: dict[tuple[str, str], Exam] = {}
        self.images: dict[str, MammogramImage] = {}
        self.other: dict[str, dict[str, dict]] = {}

        repair = not read_only
        for rec in _replay(self.data_dir / "meta.log", repair):
            self._index(rec)
        self._meta = AppendLog(self.data_dir / "meta.log", fsync=fsync, read_only=read_only)
        # identities are never needed by a read-only view
        self.links: list[dict] = [] if read_only else _replay(self.data_dir / "linkmap.log")
        self._linkmap = AppendLog(self.data_dir / "linkmap.log", mode=0o600, fsync=fsync, read_only=read_only)
        self.catalogue = Catalogue(self.data_dir / "catalogue.log", node_id, self.blob_path, fsync=fsync,
                                   read_only=read_only)

    # records ----------------------------------------------------------

    _KEYS = {"case": "case_id", "annotation": "annotation_id", "case_notice": "case_id"}

    def _index(self, rec: dict) -> None:
        tag = rec["type"]
        if tag in ("patient", "exam", "image"):
            obj = from_record(rec)
            if tag == "patient":
                self.patients[obj.key] = obj
            elif tag == "exam":
                self.exams[obj.key] = obj
            else:
                self.images[obj.guid] = obj
        else:
            key = rec[self._KEYS.get(tag, "id")]
            self.other.setdefault(tag, {})[key] = rec
        self.version += 1
        self.cache.clear()

    def put(self, obj) -> None:
        """Persist a model object (or a tagged dict) and index it."""
        rec = obj if isinstance(obj, dict) else to_record(obj)
        with self.lock:
            self._meta.append(rec)
            self._index(rec)

    def put_many(self, objs: Iterable) -> None:
        for obj in objs:
            self.put(obj)

    def records(self, tag: str) -> dict[str, dict]:
        with self.lock:
            return dict(self.other.get(tag, {}))

    def snapshot(self) -> dict:
        """Canonical view of everything indexed, for replay comparisons."""
        with self.lock:
            return {
                "patients": {"|".join(k): to_record(v) for k, v in sorted(self.patients.items())},
                "exams": {"|".join(k): to_record(v) for k, v in sorted(self.exams.items())},
                "images": {k: to_record(v) for k, v in sorted(self.images.items())},
                "other": {t: dict(sorted(d.items())) for t, d in sorted(self.other.items())},
                "catalogue": [e.to_dict() for e in self.catalogue.entries()],
            }

    # link map -------------------------------------------------------

    def append_link(self, entry: dict) -> None:
        with self.lock:
            self._linkmap.append(entry)
            self.links.append(entry)

    # blobs ----------------------------------------------------------

    def blob_path(self, guid: str) -> Path:
        return self.blob_dir / guid

    def relative_blob_path(self, guid: str) -> str:
        return f"blobs/{guid}"

    def put_blob(self, data: bytes) -> str:
        if self.read_only:
            raise StorageError(f"{self.data_dir} is open read-only")
        guid = guid_for(data)
        path = self.blob_path(guid)
        if path.exists():
            return guid
        tmp = path.with_suffix(".tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except OSError as exc:
            raise StorageError(f"cannot store blob {guid}: {exc}") from exc
        return guid

    def get_blob(self, guid: str) -> bytes:
        try:
            return self.blob_path(guid).read_bytes()
        except FileNotFoundError:
            raise NotFound(f"blob {guid}") from None

    def has_blob(self, guid: str) -> bool:
        return self.blob_path(guid).exists()

    def close(self) -> None:
        with self.lock:
            self._meta.close()
            self._linkmap.close()
            self.catalogue.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
