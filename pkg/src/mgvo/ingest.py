"""Anonymization and local registration of incoming cases."""

from __future__ import annotations

import hashlib
import hmac
import time
from dataclasses import dataclass
from typing import Callable

from .errors import InvalidCase, MgvoError
from .mgif import RawCase
from .model import (
    Exam,
    MammogramImage,
    PatientRecord,
    age_at_exam,
    validate_image,
    validate_patient,
)
from .store import LocalStore, guid_for, sha256_hex


@dataclass(frozen=True)
class LinkEntry:
    pseudonym_id: str
    patient_id: str
    patient_name: str
    created_at: float

    def to_dict(self) -> dict:
        return {
            "pseudonym_id": self.pseudonym_id,
            "patient_id": self.patient_id,
            "patient_name": self.patient_name,
            "created_at": self.created_at,
        }


@dataclass(frozen=True)
class AnonymizedCase:
    patient: PatientRecord
    exam: Exam
    image: MammogramImage


def _keyed(secret: bytes, message: str) -> str:
    return hmac.new(secret, message.encode("utf-8"), hashlib.sha256).hexdigest()


def pseudonym(node_secret: bytes, patient_id: str) -> str:
    return _keyed(node_secret, patient_id)[:16]


def lfn_for(site_id: str, pseudonym_id: str, exam_id: str, image_id: str) -> str:
    return f"/mgvo/{site_id}/{pseudonym_id}/{exam_id}/{image_id}.img"


def anonymize(raw: RawCase, node_secret: bytes, site_id: str,
              created_at: float = 0.0) -> tuple[AnonymizedCase, LinkEntry]:
    """Strip identity from ``raw``.

    The exam id is keyed on the full exam date so that two visits in one
    month stay distinct, but the date itself never leaves this function.
    """
    if isinstance(node_secret, str):
        node_secret = node_secret.encode("utf-8")
    pid = pseudonym(node_secret, raw.patient_id)
    year_month = raw.exam_date[:7]
    exam_id = "e" + _keyed(node_secret, f"exam|{raw.patient_id}|{raw.exam_date}")[:15]
    guid = guid_for(raw.pixels)
    image_id = f"{raw.laterality}{raw.view}-{guid[:8]}"

    patient = PatientRecord(
        pseudonym_id=pid,
        age_at_exam=age_at_exam(raw.birth_year, year_month),
        site_id=site_id,
        hrt_use=raw.hrt_use,
        family_history=raw.family_history,
        clinical_history=raw.clinical_history,
        diet_code=raw.diet_code,
        parity=raw.parity,
        height_cm=raw.height_cm,
        weight_kg=raw.weight_kg,
    )
    exam = Exam(exam_id=exam_id, patient=pid, exam_year_month=year_month, site_id=site_id)
    image = MammogramImage(
        image_id=image_id,
        exam=exam_id,
        laterality=raw.laterality,
        view=raw.view,
        width_px=raw.width,
        height_px=raw.height,
        bits_per_sample=raw.bits,
        lfn=lfn_for(site_id, pid, exam_id, image_id),
        guid=guid,
        acquisition=raw.acquisition,
    )
    link = LinkEntry(pid, raw.patient_id, raw.patient_name, created_at)
    return AnonymizedCase(patient, exam, image), link


def ingest_case(raw: RawCase, store: LocalStore, site_id: str, node_secret: bytes,
                clock: Callable[[], float] = time.time) -> tuple[str, str]:
    """Anonymize, persist and catalogue one case. Returns ``(lfn, guid)``.

    Re-ingesting an image whose blob is already catalogued is a no-op that
    returns the existing names.
    """
    guid = guid_for(raw.pixels)
    with store.lock:
        try:
            existing = store.catalogue.by_guid(guid)
        except MgvoError:
            existing = None
        if existing is not None:
            return existing.lfn, existing.guid

        case, link = anonymize(raw, node_secret, site_id, created_at=clock())
        problems = validate_patient(case.patient).violations
        problems += validate_image(case.image, len(raw.pixels)).violations
        if problems:
            raise InvalidCase("; ".join(problems))

        store.put_blob(raw.pixels)
        store.put(case.patient)
        store.put(case.exam)
        store.put(case.image)
        store.append_link(link.to_dict())
        store.catalogue.register(
            case.image.lfn, guid, len(raw.pixels), sha256_hex(raw.pixels),
            (store.node_id, store.relative_blob_path(guid)),
        )
        return case.image.lfn, guid
