"""MGIF ingest container.

Layout::

    0..3    b"MGIF"
    4       version (0x01)
    5..8    header length H, uint32 little-endian
    9..     H bytes of UTF-8 "key=value\\n" lines
    ...     pixel blob, row-major, little-endian samples
"""

from __future__ import annotations

import datetime as dt
import struct
from dataclasses import dataclass
from typing import Optional

from .errors import BadMagic, MalformedHeader, MissingKey, PixelSizeMismatch, UnsupportedVersion
from .model import AcquisitionParams

MAGIC = b"MGIF"
VERSION = 1
_PREFIX = struct.Struct("<4sBI")

REQUIRED_KEYS = (
    "patient.name", "patient.id", "patient.birth_year", "exam.date",
    "image.view", "image.laterality", "image.width", "image.height", "image.bits",
    "acq.kvp", "acq.mas", "acq.compression_n", "acq.thickness_mm",
)
OPTIONAL_KEYS = (
    "patient.hrt", "patient.parity", "patient.height_cm", "patient.weight_kg",
    "patient.family_history", "patient.diet", "patient.clinical_history",
)


@dataclass(frozen=True)
class RawCase:
    patient_name: str
    patient_id: str
    birth_year: int
    exam_date: str
    view: str
    laterality: str
    width: int
    height: int
    bits: int
    acquisition: AcquisitionParams
    pixels: bytes
    hrt_use: Optional[bool] = None
    family_history: Optional[bool] = None
    clinical_history: Optional[str] = None
    diet_code: Optional[str] = None
    parity: Optional[int] = None
    height_cm: Optional[float] = None
    weight_kg: Optional[float] = None

    @property
    def expected_blob_size(self) -> int:
        return self.width * self.height * (self.bits // 8)


def _int(key, text):
    try:
        return int(text)
    except ValueError:
        raise MalformedHeader(f"{key}: not an integer: {text!r}") from None


def _float(key, text):
    try:
        return float(text)
    except ValueError:
        raise MalformedHeader(f"{key}: not a number: {text!r}") from None


def _bool(key, text):
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise MalformedHeader(f"{key}: not a boolean: {text!r}")


def _header_lines(raw: bytes) -> dict[str, str]:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"header is not UTF-8: {exc}") from None
    if text and not text.endswith("\n"):
        raise MalformedHeader("header does not end with a newline")
    header: dict[str, str] = {}
    for n, line in enumerate(text.split("\n")[:-1], 1):
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise MalformedHeader(f"line {n} is not key=value")
        if key in header:
            raise MalformedHeader(f"duplicate key {key}")
        header[key] = value
    return header


def parse_mgif(data: bytes) -> RawCase:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("input does not start with MGIF")
    if len(data) < _PREFIX.size:
        raise MalformedHeader("truncated prefix")
    _, version, hlen = _PREFIX.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise MalformedHeader(f"header length {hlen} exceeds input")
    header = _header_lines(data[start:start + hlen])
    for key in REQUIRED_KEYS:
        if key not in header:
            raise MissingKey(key)

    date_text = header["exam.date"]
    try:
        if len(date_text) != 10:
            raise ValueError
        dt.date.fromisoformat(date_text)
    except ValueError:
        raise MalformedHeader(f"exam.date: not YYYY-MM-DD: {date_text!r}") from None

    bits = _int("image.bits", header["image.bits"])
    width = _int("image.width", header["image.width"])
    height = _int("image.height", header["image.height"])
    if bits not in (8, 16):
        raise MalformedHeader(f"image.bits must be 8 or 16, got {bits}")
    if width <= 0 or height <= 0:
        raise MalformedHeader("image dimensions must be positive")

    blob = data[start + hlen:]
    expected = width * height * bits // 8
    if len(blob) != expected:
        raise PixelSizeMismatch(expected, len(blob))

    opt = {}
    if "patient.hrt" in header:
        opt["hrt_use"] = _bool("patient.hrt", header["patient.hrt"])
    if "patient.family_history" in header:
        opt["family_history"] = _bool("patient.family_history", header["patient.family_history"])
    if "patient.parity" in header:
        opt["parity"] = _int("patient.parity", header["patient.parity"])
    if "patient.height_cm" in header:
        opt["height_cm"] = _float("patient.height_cm", header["patient.height_cm"])
    if "patient.weight_kg" in header:
        opt["weight_kg"] = _float("patient.weight_kg", header["patient.weight_kg"])
    if "patient.diet" in header:
        opt["diet_code"] = header["patient.diet"]
    if "patient.clinical_history" in header:
        opt["clinical_history"] = header["patient.clinical_history"]

    return RawCase(
        patient_name=header["patient.name"],
        patient_id=header["patient.id"],
        birth_year=_int("patient.birth_year", header["patient.birth_year"]),
        exam_date=date_text,
        view=header["image.view"],
        laterality=header["image.laterality"],
        width=width,
        height=height,
        bits=bits,
        acquisition=AcquisitionParams(
            kvp=_float("acq.kvp", header["acq.kvp"]),
            mas=_float("acq.mas", header["acq.mas"]),
            compression_n=_float("acq.compression_n", header["acq.compression_n"]),
            thickness_mm=_float("acq.thickness_mm", header["acq.thickness_mm"]),
        ),
        pixels=bytes(blob),
        **opt,
    )


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def serialize_mgif(case: RawCase) -> bytes:
    pairs = [
        ("patient.name", case.patient_name),
        ("patient.id", case.patient_id),
        ("patient.birth_year", str(case.birth_year)),
        ("exam.date", case.exam_date),
        ("image.view", case.view),
        ("image.laterality", case.laterality),
        ("image.width", str(case.width)),
        ("image.height", str(case.height)),
        ("image.bits", str(case.bits)),
        ("acq.kvp", repr(float(case.acquisition.kvp))),
        ("acq.mas", repr(float(case.acquisition.mas))),
        ("acq.compression_n", repr(float(case.acquisition.compression_n))),
        ("acq.thickness_mm", repr(float(case.acquisition.thickness_mm))),
    ]
    if case.hrt_use is not None:
        pairs.append(("patient.hrt", _fmt_bool(case.hrt_use)))
    if case.family_history is not None:
        pairs.append(("patient.family_history", _fmt_bool(case.family_history)))
    if case.parity is not None:
        pairs.append(("patient.parity", str(case.parity)))
    if case.height_cm is not None:
        pairs.append(("patient.height_cm", repr(float(case.height_cm))))
    if case.weight_kg is not None:
        pairs.append(("patient.weight_kg", repr(float(case.weight_kg))))
    if case.diet_code is not None:
        pairs.append(("patient.diet", case.diet_code))
    if case.clinical_history is not None:
        pairs.append(("patient.clinical_history", case.clinical_history))
    for key, value in pairs:
        if "\n" in value:
            raise MalformedHeader(f"{key} contains a newline")
    header = "".join(f"{k}={v}\n" for k, v in pairs).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + case.pixels
