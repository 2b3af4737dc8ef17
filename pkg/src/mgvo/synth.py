"""Seeded synthetic cohorts and random queries for tests and demos."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .ingest import lfn_for
from .model import AcquisitionParams, Exam, MammogramImage, PatientRecord
from .store import guid_for

SITES = ("addenbrookes", "oxford", "udine")
DIETS = ("A", "B", "C", "D")
HISTORIES = ("none", "cyst", "fibroadenoma", "prior_biopsy")


@dataclass
class SiteData:
    patients: list[PatientRecord] = field(default_factory=list)
    exams: list[Exam] = field(default_factory=list)
    images: list[MammogramImage] = field(default_factory=list)
    blobs: dict[str, bytes] = field(default_factory=dict)


def _maybe(rng: random.Random, value, p_missing: float = 0.2):
    return None if rng.random() < p_missing else value


def random_blob(rng: random.Random, size: int) -> bytes:
    return rng.randbytes(size)


def make_cohort(n_images: int, sites=SITES, seed: int = 0, width: int = 8, height: int = 8,
                bits: int = 8, blob_fn: Optional[Callable[[random.Random, int], bytes]] = None
                ) -> dict[str, SiteData]:
    """About ``n_images`` images, 1-4 per exam and 1-2 exams per patient,
    spread round-robin over ``sites``."""
    rng = random.Random(seed)
    blob_fn = blob_fn or random_blob
    data = {s: SiteData() for s in sites}
    size = width * height * bits // 8
    made = 0
    k = 0
    while made < n_images:
        site = sites[k % len(sites)]
        k += 1
        d = data[site]
        pid = "%016x" % rng.getrandbits(64)
        patient = PatientRecord(
            pseudonym_id=pid,
            age_at_exam=rng.randint(38, 79),
            site_id=site,
            hrt_use=_maybe(rng, rng.random() < 0.3),
            family_history=_maybe(rng, rng.random() < 0.2),
            clinical_history=_maybe(rng, rng.choice(HISTORIES)),
            diet_code=_maybe(rng, rng.choice(DIETS)),
            parity=_maybe(rng, rng.randint(0, 4)),
            height_cm=_maybe(rng, round(rng.uniform(150, 185), 1)),
            weight_kg=_maybe(rng, round(rng.uniform(48, 100), 1)),
        )
        d.patients.append(patient)
        for _ in range(rng.randint(1, 2)):
            exam = Exam(
                exam_id="e%015x" % rng.getrandbits(60),
                patient=pid,
                exam_year_month=f"{rng.randint(2002, 2005)}-{rng.randint(1, 12):02d}",
                site_id=site,
            )
            d.exams.append(exam)
            for lat, view in rng.sample([("L", "CC"), ("R", "CC"), ("L", "MLO"), ("R", "MLO")],
                                        rng.randint(1, 4)):
                if made >= n_images:
                    break
                blob = blob_fn(rng, size)
                guid = guid_for(blob)
                image_id = f"{lat}{view}-{guid[:8]}"
                d.images.append(MammogramImage(
                    image_id=image_id, exam=exam.exam_id, laterality=lat, view=view,
                    width_px=width, height_px=height, bits_per_sample=bits,
                    lfn=lfn_for(site, pid, exam.exam_id, image_id), guid=guid,
                    acquisition=AcquisitionParams(
                        kvp=float(rng.randint(25, 34)),
                        mas=round(rng.uniform(20, 200), 1),
                        compression_n=float(rng.randint(0, 200)),
                        thickness_mm=float(rng.randint(20, 90)),
                    ),
                ))
                d.blobs[guid] = blob
                made += 1
    return data


def load_site(box, d: SiteData) -> None:
    box.store.put_many(d.patients)
    box.store.put_many(d.exams)
    for im in d.images:
        box.load_image(im, d.blobs[im.guid])


def load_union(box, data: dict[str, SiteData]) -> None:
    for d in data.values():
        load_site(box, d)


# ------------------------------------------------------------- queries

def _atom_for(rng: random.Random, field: str) -> str:
    def num(lo, hi, integer=True):
        return str(rng.randint(lo, hi)) if integer else f"{rng.uniform(lo, hi):.1f}"

    def q(s):
        return "'" + s + "'"

    numeric = {
        "patient.age_at_exam": (38, 79, True), "patient.parity": (0, 4, True),
        "patient.height_cm": (150, 185, False), "patient.weight_kg": (48, 100, False),
        "acq.kvp": (25, 34, True), "acq.mas": (20, 200, False),
        "acq.compression_n": (0, 200, True), "acq.thickness_mm": (20, 90, True),
    }
    if field in numeric:
        lo, hi, integer = numeric[field]
        shape = rng.random()
        if shape < 0.2:
            a, b = sorted((num(lo, hi, integer), num(lo, hi, integer)), key=float)
            return f"{field} BETWEEN {a} AND {b}"
        op = rng.choice(["=", "!=", "<", "<=", ">", ">="] if integer else ["<", "<=", ">", ">="])
        return f"{field} {op} {num(lo, hi, integer)}"
    choices = {
        "image.view": ("CC", "MLO"), "image.laterality": ("L", "R"),
        "patient.diet_code": DIETS, "patient.clinical_history": HISTORIES,
        "exam.site_id": SITES, "patient.site_id": SITES,
    }
    if field in choices:
        opts = choices[field]
        if rng.random() < 0.3:
            picked = rng.sample(opts, rng.randint(1, len(opts)))
            return f"{field} IN ({', '.join(q(p) for p in picked)})"
        return f"{field} {rng.choice(['=', '!='])} {q(rng.choice(opts))}"
    if field in ("patient.hrt_use", "patient.family_history"):
        return f"{field} {rng.choice(['=', '!='])} {rng.choice(['TRUE', 'FALSE'])}"
    if field == "exam.exam_year_month":
        return f"{field} {rng.choice(['<', '>=', '<=', '>'])} '{rng.randint(2002, 2005)}-{rng.randint(1, 12):02d}'"
    raise ValueError(field)


QUERY_FIELDS = (
    "patient.age_at_exam", "patient.parity", "patient.height_cm", "patient.weight_kg",
    "acq.kvp", "acq.mas", "acq.compression_n", "acq.thickness_mm",
    "image.view", "image.laterality", "patient.diet_code", "patient.clinical_history",
    "exam.site_id", "patient.site_id", "patient.hrt_use", "patient.family_history",
    "exam.exam_year_month",
)


def random_query(rng: random.Random, allowed_fields=None, entity: Optional[str] = None,
                 count_only: Optional[bool] = None) -> str:
    fields = [f for f in QUERY_FIELDS if allowed_fields is None or f in allowed_fields]
    entity = entity or rng.choice(["patients", "exams", "images", "images"])
    usable = [f for f in fields if entity == "images"
              or (entity == "exams" and not f.startswith(("image.", "acq.")))
              or (entity == "patients" and f.startswith("patient."))]
    atoms = [_atom_for(rng, f) for f in rng.sample(usable, rng.randint(1, 3))]
    count = rng.random() < 0.1 if count_only is None else count_only
    return f"SELECT {entity} WHERE {' AND '.join(atoms)}" + (" COUNT" if count else "")


# ------------------------------------------------------------- raw cases

def random_raw_case(rng: random.Random, patient_id: str, patient_name: str, width: int = 16,
                    height: int = 16, bits: int = 8, birth_year: Optional[int] = None):
    """A plausible MGIF case with identifying fields supplied by the caller."""
    from .mgif import RawCase

    view, lat = rng.choice(["CC", "MLO"]), rng.choice(["L", "R"])
    return RawCase(
        patient_name=patient_name,
        patient_id=patient_id,
        birth_year=birth_year or rng.randint(1925, 1966),
        exam_date=f"{rng.randint(2003, 2005)}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}",
        view=view, laterality=lat, width=width, height=height, bits=bits,
        acquisition=AcquisitionParams(float(rng.randint(25, 34)), round(rng.uniform(20, 200), 1),
                                      float(rng.randint(0, 200)), float(rng.randint(20, 90))),
        pixels=rng.randbytes(width * height * bits // 8),
        hrt_use=_maybe(rng, rng.random() < 0.3),
        family_history=_maybe(rng, rng.random() < 0.2),
        diet_code=_maybe(rng, rng.choice(DIETS)),
        parity=_maybe(rng, rng.randint(0, 4)),
        height_cm=_maybe(rng, round(rng.uniform(150, 185), 1)),
        weight_kg=_maybe(rng, round(rng.uniform(48, 100), 1)),
        clinical_history=_maybe(rng, rng.choice(HISTORIES)),
    )
