"""Blind second reading.

A case lives on the node that owns the image. Two readers take part: the
requesting clinician and one clinician at the target site. Neither sees
the other's annotation until both have submitted.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

from .errors import CaseClosed, Denied, DuplicateAuthor, InvalidAnnotation, NotFound, NotReady, SameSite
from .security import Identity, authorize

STATES = ("open", "first_submitted", "both_submitted", "reported")
LABELS = ("mass", "microcalcification_cluster", "benign", "malignant", "normal", "other")


@dataclass(frozen=True)
class Annotation:
    annotation_id: str
    case_id: str
    guid: str
    author: str
    region: tuple
    label: str
    note: str
    submitted_at: float

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["region"] = [list(v) for v in self.region]
        rec["type"] = "annotation"
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Annotation":
        rec = {k: v for k, v in rec.items() if k != "type"}
        rec["region"] = tuple(tuple(v) for v in rec["region"])
        return cls(**rec)


@dataclass
class SecondOpinionCase:
    case_id: str
    guid: str
    lfn: str
    requester: str
    requester_site: str
    target_site: str
    owner_node: str
    state: str = "open"
    created_at: float = 0.0
    annotations: list[Annotation] = field(default_factory=list)

    def to_record(self) -> dict:
        rec = asdict(self)
        del rec["annotations"]
        rec["type"] = "case"
        return rec

    def summary(self) -> dict:
        rec = self.to_record()
        del rec["type"]
        return rec


def owner_of(case_id: str) -> str:
    owner, dot, _ = case_id.rpartition(".")
    if not dot or not owner:
        raise NotFound(f"malformed case id {case_id!r}")
    return owner


def parse_region(text: str) -> tuple:
    """``"x,y;x,y;..."`` -> vertex tuple."""
    try:
        pts = tuple(tuple(float(c) if "." in c else int(c) for c in p.split(",")) for p in text.split(";") if p)
    except ValueError:
        raise InvalidAnnotation(f"bad region {text!r}") from None
    if any(len(p) != 2 for p in pts):
        raise InvalidAnnotation(f"bad region {text!r}")
    return pts


def _require_clinician(identity: Identity, action: str) -> None:
    decision = authorize(identity, action)
    if not decision:
        raise Denied(decision.reason)


class CaseBook:
    """Cases owned by one node, persisted as case/annotation records."""

    def __init__(self, store, node_id: str, clock: Callable[[], float] = time.time):
        self.store = store
        self.node_id = node_id
        self.clock = clock
        self.cases: dict[str, SecondOpinionCase] = {}
        for rec in store.records("case").values():
            rec = {k: v for k, v in rec.items() if k != "type"}
            self.cases[rec["case_id"]] = SecondOpinionCase(**rec)
        anns = [Annotation.from_record(r) for r in store.records("annotation").values()]
        for ann in sorted(anns, key=lambda a: a.annotation_id):
            self.cases[ann.case_id].annotations.append(ann)

    # ---------------------------------------------------------------

    def _get(self, case_id: str) -> SecondOpinionCase:
        try:
            return self.cases[case_id]
        except KeyError:
            raise NotFound(f"case {case_id}") from None

    @staticmethod
    def side(case: SecondOpinionCase, identity: Identity) -> Optional[str]:
        if identity.subject == case.requester:
            return "requester"
        if identity.site == case.target_site:
            taken = [a.author for a in case.annotations if a.author != case.requester]
            if not taken or identity.subject in taken:
                return "target"
        return None

    def _participant(self, case: SecondOpinionCase, identity: Identity, action: str) -> str:
        _require_clinician(identity, action)
        side = self.side(case, identity)
        if side is None:
            raise Denied(f"{identity.subject} is not a participant in {case.case_id}")
        return side

    def _set_state(self, case: SecondOpinionCase, state: str) -> None:
        assert STATES.index(state) >= STATES.index(case.state)
        case.state = state
        self.store.put(case.to_record())

    # ------------------------------------------------------------- ops

    def create(self, image, identity: Identity, target_site: str) -> SecondOpinionCase:
        _require_clinician(identity, "second_opinion")
        site = identity.site
        if site is None:
            raise Denied("requester subject carries no site")
        if site == target_site:
            raise SameSite(f"target site {target_site} is the requester's own site")
        with self.store.lock:
            case_id = f"{self.node_id}.{len(self.cases) + 1:04d}"
            case = SecondOpinionCase(
                case_id=case_id, guid=image.guid, lfn=image.lfn,
                requester=identity.subject, requester_site=site, target_site=target_site,
                owner_node=self.node_id, created_at=self.clock(),
            )
            self.cases[case_id] = case
            self.store.put(case.to_record())
        return case

    def submit(self, case_id: str, identity: Identity, region, label: str, note: str = "",
               bounds: Optional[tuple[int, int]] = None) -> SecondOpinionCase:
        with self.store.lock:
            case = self._get(case_id)
            _require_clinician(identity, "annotate")
            if any(a.author == identity.subject for a in case.annotations):
                raise DuplicateAuthor(f"{identity.subject} already annotated {case_id}")
            if STATES.index(case.state) >= STATES.index("both_submitted"):
                raise CaseClosed(f"{case_id} is {case.state}")
            if self.side(case, identity) is None:
                raise Denied(f"{identity.subject} is not a participant in {case_id}")
            region = tuple(tuple(v) for v in region)
            _check_annotation(region, label, bounds)
            ann = Annotation(
                annotation_id=f"{case_id}/{len(case.annotations) + 1}",
                case_id=case_id, guid=case.guid, author=identity.subject,
                region=region, label=label, note=note, submitted_at=self.clock(),
            )
            self.store.put(ann.to_record())
            case.annotations.append(ann)
            self._set_state(case, "first_submitted" if len(case.annotations) == 1 else "both_submitted")
            return case

    def view(self, case_id: str, identity: Identity) -> dict:
        with self.store.lock:
            case = self._get(case_id)
            self._participant(case, identity, "second_opinion")
            return blind_view(case, identity.subject)

    def report(self, case_id: str, identity: Identity) -> dict:
        with self.store.lock:
            case = self._get(case_id)
            self._participant(case, identity, "second_opinion")
            if STATES.index(case.state) < STATES.index("both_submitted"):
                raise NotReady(f"{case_id} is {case.state}")
            if case.state != "reported":
                self._set_state(case, "reported")
            first, second = case.annotations
            return {
                "case": case.summary(),
                "annotations": [a.to_record() for a in case.annotations],
                "agreement": first.label == second.label,
            }

    def list_for(self, identity: Identity) -> list[dict]:
        out = []
        for case in sorted(self.cases.values(), key=lambda c: c.case_id):
            if self.side(case, identity) is not None:
                out.append(case.summary())
        return out


def blind_view(case: SecondOpinionCase, viewer: str) -> dict:
    """What ``viewer`` may see of ``case``."""
    view = case.summary()
    if STATES.index(case.state) >= STATES.index("both_submitted"):
        shown = case.annotations
    else:
        shown = [a for a in case.annotations if a.author == viewer]
    view["annotations"] = [a.to_record() for a in shown]
    return view


def _check_annotation(region: tuple, label: str, bounds: Optional[tuple[int, int]]) -> None:
    if label not in LABELS:
        raise InvalidAnnotation(f"unknown label {label!r}")
    if len(region) < 3:
        raise InvalidAnnotation("a region needs at least 3 vertices")
    if bounds is not None:
        width, height = bounds
        for x, y in region:
            if not (0 <= x < width and 0 <= y < height):
                raise InvalidAnnotation(f"vertex ({x}, {y}) outside {width}x{height} image")
