"""Anonymized metadata schema: patients, exams, images.

Records are plain dataclasses. Their canonical serialization is one JSON
object per record with a ``type`` tag, used both in the node log and on
the wire.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import DomainError

PSEUDONYM_RE = re.compile(r"[0-9a-f]{16}")
GUID_RE = re.compile(r"[0-9a-f]{32}")
YEAR_MONTH_RE = re.compile(r"(\d{4})-(\d{2})")

VIEWS = ("CC", "MLO")
LATERALITIES = ("L", "R")
BITS = (8, 16)
ACQ_LIMIT = 1e4


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class PatientRecord:
    pseudonym_id: str
    age_at_exam: int
    site_id: str
    hrt_use: Optional[bool] = None
    family_history: Optional[bool] = None
    clinical_history: Optional[str] = None
    diet_code: Optional[str] = None
    parity: Optional[int] = None
    height_cm: Optional[float] = None
    weight_kg: Optional[float] = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.site_id, self.pseudonym_id)


@dataclass(frozen=True)
class Exam:
    exam_id: str
    patient: str
    exam_year_month: str
    site_id: str

    @property
    def key(self) -> tuple[str, str]:
        return (self.site_id, self.exam_id)


@dataclass(frozen=True)
class AcquisitionParams:
    kvp: float
    mas: float
    compression_n: float
    thickness_mm: float


@dataclass(frozen=True)
class MammogramImage:
    image_id: str
    exam: str
    laterality: str
    view: str
    width_px: int
    height_px: int
    bits_per_sample: int
    lfn: str
    guid: str
    acquisition: AcquisitionParams
    density: Optional[float] = None

    @property
    def blob_size(self) -> int:
        return self.width_px * self.height_px * (self.bits_per_sample // 8)


RECORD_TYPES = {"patient": PatientRecord, "exam": Exam, "image": MammogramImage}
_TAGS = {cls: tag for tag, cls in RECORD_TYPES.items()}


def to_record(obj) -> dict:
    """Canonical dict form with a ``type`` tag."""
    rec = dataclasses.asdict(obj)
    rec["type"] = _TAGS[type(obj)]
    return rec


def from_record(rec: dict):
    rec = dict(rec)
    tag = rec.pop("type")
    cls = RECORD_TYPES[tag]
    if cls is MammogramImage:
        rec["acquisition"] = AcquisitionParams(**rec["acquisition"])
    return cls(**rec)


# ---------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_patient(record: PatientRecord) -> ValidationReport:
    out = []
    if not isinstance(record.pseudonym_id, str) or not PSEUDONYM_RE.fullmatch(record.pseudonym_id):
        out.append("pseudonym_id is not 16 lowercase hex characters")
    if not isinstance(record.age_at_exam, int) or isinstance(record.age_at_exam, bool) \
            or not 0 <= record.age_at_exam <= 130:
        out.append("age_at_exam out of range")
    if record.parity is not None and (not isinstance(record.parity, int) or record.parity < 0):
        out.append("parity negative")
    for name in ("height_cm", "weight_kg"):
        v = getattr(record, name)
        if v is not None and (not _is_number(v) or v < 0):
            out.append(f"{name} negative")
    if not record.site_id:
        out.append("site_id missing")
    return ValidationReport(out)


def parse_year_month(text: str) -> tuple[int, int]:
    m = YEAR_MONTH_RE.fullmatch(text or "")
    if not m or not 1 <= int(m.group(2)) <= 12:
        raise DomainError(f"not a valid year-month: {text!r}")
    return int(m.group(1)), int(m.group(2))


def validate_exam(exam: Exam, known_patients=None) -> ValidationReport:
    out = []
    try:
        parse_year_month(exam.exam_year_month)
    except DomainError:
        out.append("exam_year_month invalid")
    if known_patients is not None and exam.patient not in known_patients:
        out.append("referenced patient unknown")
    return ValidationReport(out)


def validate_image(image: MammogramImage, blob_size: int) -> ValidationReport:
    out = []
    if image.view not in VIEWS:
        out.append("unknown view")
    if image.laterality not in LATERALITIES:
        out.append("unknown laterality")
    if image.bits_per_sample not in BITS:
        out.append("unsupported bits_per_sample")
    dims_ok = True
    for name in ("width_px", "height_px"):
        v = getattr(image, name)
        if not isinstance(v, int) or v <= 0:
            out.append(f"{name} not positive")
            dims_ok = False
    if dims_ok and image.bits_per_sample in BITS and image.blob_size != blob_size:
        out.append(f"blob size mismatch (expected {image.blob_size})")
    if not GUID_RE.fullmatch(image.guid or ""):
        out.append("guid is not 32 hex characters")
    acq = image.acquisition
    for name in ("kvp", "mas", "thickness_mm"):
        v = getattr(acq, name)
        if not _is_number(v) or not 0 < v < ACQ_LIMIT:
            out.append(f"acquisition.{name} out of range")
    if not _is_number(acq.compression_n) or not 0 <= acq.compression_n < ACQ_LIMIT:
        out.append("acquisition.compression_n out of range")
    if image.density is not None and not (_is_number(image.density) and 0 <= image.density <= 1):
        out.append("density out of range")
    return ValidationReport(out)


def age_at_exam(birth_year: int, exam_year_month: str) -> int:
    # month deliberately ignored: birth month is never ingested
    year, _ = parse_year_month(exam_year_month)
    if birth_year > year:
        raise DomainError(f"birth year {birth_year} after exam year {year}")
    return year - birth_year


# ------------------------------------------------------------ field registry

# qualified query field -> (entity tag, attribute path, value kind)
FIELD_REGISTRY: dict[str, tuple[str, tuple[str, ...], str]] = {
    "patient.pseudonym_id": ("patient", ("pseudonym_id",), "str"),
    "patient.age_at_exam": ("patient", ("age_at_exam",), "int"),
    "patient.hrt_use": ("patient", ("hrt_use",), "bool"),
    "patient.family_history": ("patient", ("family_history",), "bool"),
    "patient.clinical_history": ("patient", ("clinical_history",), "str"),
    "patient.diet_code": ("patient", ("diet_code",), "str"),
    "patient.parity": ("patient", ("parity",), "int"),
    "patient.height_cm": ("patient", ("height_cm",), "number"),
    "patient.weight_kg": ("patient", ("weight_kg",), "number"),
    "patient.site_id": ("patient", ("site_id",), "str"),
    "exam.exam_id": ("exam", ("exam_id",), "str"),
    "exam.patient": ("exam", ("patient",), "str"),
    "exam.exam_year_month": ("exam", ("exam_year_month",), "str"),
    "exam.site_id": ("exam", ("site_id",), "str"),
    "image.image_id": ("image", ("image_id",), "str"),
    "image.exam": ("image", ("exam",), "str"),
    "image.laterality": ("image", ("laterality",), "str"),
    "image.view": ("image", ("view",), "str"),
    "image.width_px": ("image", ("width_px",), "int"),
    "image.height_px": ("image", ("height_px",), "int"),
    "image.bits_per_sample": ("image", ("bits_per_sample",), "int"),
    "image.lfn": ("image", ("lfn",), "str"),
    "image.guid": ("image", ("guid",), "str"),
    "image.density": ("image", ("density",), "number"),
    "acq.kvp": ("image", ("acquisition", "kvp"), "number"),
    "acq.mas": ("image", ("acquisition", "mas"), "number"),
    "acq.compression_n": ("image", ("acquisition", "compression_n"), "number"),
    "acq.thickness_mm": ("image", ("acquisition", "thickness_mm"), "number"),
}


def _check_registry_total() -> None:
    covered = {(ent, path) for ent, path, _ in FIELD_REGISTRY.values()}
    for tag, cls in RECORD_TYPES.items():
        for f in dataclasses.fields(cls):
            if f.name == "acquisition":
                for sub in dataclasses.fields(AcquisitionParams):
                    assert (tag, ("acquisition", sub.name)) in covered, sub.name
            else:
                assert (tag, (f.name,)) in covered, f"{tag}.{f.name} missing from registry"
    assert len(covered) == len(FIELD_REGISTRY)


_check_registry_total()


def field_value(obj, path: tuple[str, ...]):
    for part in path:
        obj = getattr(obj, part)
    return obj
