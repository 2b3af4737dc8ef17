import itertools
import threading

import pytest

from mgvo.collab import CaseBook, blind_view, owner_of, parse_region
from mgvo.errors import (
    CaseClosed,
    Denied,
    DuplicateAuthor,
    InvalidAnnotation,
    NotFound,
    NotReady,
    SameSite,
)
from mgvo.security import Identity
from mgvo.store import LocalStore

A = Identity("alice@addenbrookes", "mgvo", frozenset({"clinician"}), 10 ** 10)
B = Identity("bruno@udine", "mgvo", frozenset({"clinician"}), 10 ** 10)
B2 = Identity("bea@udine", "mgvo", frozenset({"clinician"}), 10 ** 10)
X = Identity("xavier@oxford", "mgvo", frozenset({"clinician"}), 10 ** 10)
R = Identity("rita@udine", "mgvo", frozenset({"researcher"}), 10 ** 10)
TRI = ((1, 1), (6, 1), (6, 6))


class MemStore:
    """Just enough of LocalStore for a CaseBook."""

    def __init__(self):
        self.lock = threading.RLock()
        self.other = {}

    def put(self, rec):
        key = rec["case_id"] if rec["type"] == "case" else rec["annotation_id"]
        self.other.setdefault(rec["type"], {})[key] = dict(rec)

    def records(self, tag):
        return dict(self.other.get(tag, {}))


class FakeImage:
    guid = "g" * 32
    lfn = "/mgvo/addenbrookes/p/e/LCC-gggggggg"


def new_case(store=None):
    book = CaseBook(store or MemStore(), "addenbrookes", clock=lambda: 100.0)
    case = book.create(FakeImage, A, "udine")
    return book, case.case_id


def test_create():
    book, cid = new_case()
    assert cid == "addenbrookes.0001" and owner_of(cid) == "addenbrookes"
    assert book.cases[cid].state == "open"
    assert [c["case_id"] for c in book.list_for(B)] == [cid]
    assert book.list_for(X) == []


def test_create_rules():
    book = CaseBook(MemStore(), "n1")
    with pytest.raises(SameSite):
        book.create(FakeImage, A, "addenbrookes")
    with pytest.raises(Denied):
        book.create(FakeImage, R, "oxford")
    with pytest.raises(Denied):
        book.create(FakeImage, Identity("nosite", "mgvo", frozenset({"clinician"}), 10 ** 10), "udine")


def test_blind_until_both_then_report():
    book, cid = new_case()
    book.submit(cid, B, TRI, "malignant")
    assert book.cases[cid].state == "first_submitted"
    assert book.view(cid, A)["annotations"] == []
    assert [a["author"] for a in book.view(cid, B)["annotations"]] == [B.subject]
    with pytest.raises(NotReady):
        book.report(cid, A)
    book.submit(cid, A, TRI, "benign")
    assert book.cases[cid].state == "both_submitted"
    assert len(book.view(cid, A)["annotations"]) == 2
    rep = book.report(cid, B)
    assert rep["agreement"] is False and book.cases[cid].state == "reported"
    assert book.report(cid, A)["agreement"] is False


def test_agreement_true():
    book, cid = new_case()
    book.submit(cid, A, TRI, "mass")
    book.submit(cid, B, TRI, "mass")
    assert book.report(cid, A)["agreement"] is True


def test_duplicate_and_closed():
    book, cid = new_case()
    book.submit(cid, A, TRI, "mass")
    with pytest.raises(DuplicateAuthor):
        book.submit(cid, A, TRI, "normal")
    book.submit(cid, B, TRI, "mass")
    with pytest.raises(CaseClosed):
        book.submit(cid, B2, TRI, "mass")


def test_only_one_target_reader():
    book, cid = new_case()
    book.submit(cid, B, TRI, "mass")
    with pytest.raises(Denied):
        book.view(cid, B2)
    with pytest.raises(Denied):
        book.submit(cid, B2, TRI, "mass")


def test_outsiders_and_non_clinicians():
    book, cid = new_case()
    for who in (X, R):
        with pytest.raises(Denied):
            book.view(cid, who)
        with pytest.raises(Denied):
            book.submit(cid, who, TRI, "mass")
    with pytest.raises(NotFound):
        book.view("addenbrookes.0099", A)


@pytest.mark.parametrize("region,label", [
    (((0, 0), (1, 1)), "mass"),
    (TRI, "tumour"),
    (((0, 0), (1, 1), (8, 2)), "mass"),
    (((0, 0), (1, 1), (2, -1)), "mass"),
])
def test_invalid_annotation(region, label):
    book, cid = new_case()
    with pytest.raises(InvalidAnnotation):
        book.submit(cid, A, region, label, bounds=(8, 8))
    assert book.cases[cid].state == "open"


def test_parse_region():
    assert parse_region("1,2;3,4;5.5,6") == ((1, 2), (3, 4), (5.5, 6))
    for bad in ("1,2;3", "a,b;1,1;2,2"):
        with pytest.raises(InvalidAnnotation):
            parse_region(bad)
    with pytest.raises(NotFound):
        owner_of("nodot")


def test_persisted_across_reopen(tmp_path):
    store = LocalStore(tmp_path / "n", "addenbrookes")
    book, cid = new_case(store)
    book.submit(cid, B, TRI, "mass")
    store.close()
    store = LocalStore(tmp_path / "n", "addenbrookes")
    book = CaseBook(store, "addenbrookes")
    assert book.cases[cid].state == "first_submitted"
    assert book.view(cid, A)["annotations"] == []
    book.submit(cid, A, TRI, "mass")
    assert book.report(cid, A)["agreement"] is True
    store.close()


# ------------------------------------------------ exhaustive interleavings

OPS = ("sA", "sB", "vA", "vB", "rA", "rB", "sB2")


def _run(seq):
    """Run one interleaving; check every observable against a tiny model."""
    book, cid = new_case()
    submitted = []  # authors in order
    labels = {A.subject: "mass", B.subject: "benign", B2.subject: "mass"}
    who = {"A": A, "B": B, "B2": B2}
    for op in seq:
        kind, actor = op[0], who[op[1:]]
        both = len(submitted) == 2
        target_taken = next((s for s in submitted if s != A.subject), None)
        participant = actor is A or target_taken in (None, actor.subject)
        if kind == "s":
            if actor.subject in submitted:
                with pytest.raises(DuplicateAuthor):
                    book.submit(cid, actor, TRI, labels[actor.subject])
            elif both:
                with pytest.raises(CaseClosed):
                    book.submit(cid, actor, TRI, labels[actor.subject])
            elif not participant:
                with pytest.raises(Denied):
                    book.submit(cid, actor, TRI, labels[actor.subject])
            else:
                book.submit(cid, actor, TRI, labels[actor.subject])
                submitted.append(actor.subject)
        elif kind == "v":
            if not participant:
                with pytest.raises(Denied):
                    book.view(cid, actor)
                continue
            seen = [a["author"] for a in book.view(cid, actor)["annotations"]]
            if both:
                assert seen == submitted
            else:
                assert seen == [s for s in submitted if s == actor.subject]
        else:
            if not participant:
                with pytest.raises(Denied):
                    book.report(cid, actor)
            elif not both:
                with pytest.raises(NotReady):
                    book.report(cid, actor)
            else:
                rep = book.report(cid, actor)
                assert rep["agreement"] == (labels[submitted[0]] == labels[submitted[1]])
                assert [a["author"] for a in rep["annotations"]] == submitted
        # no state ever shows a foreign annotation before both are in
        case = book.cases[cid]
        for viewer in (A.subject, B.subject, B2.subject):
            shown = [a["author"] for a in blind_view(case, viewer)["annotations"]]
            if len(submitted) < 2:
                assert set(shown) <= {viewer}
        expected_state = ("open", "first_submitted", "both_submitted")[len(submitted)]
        assert case.state == expected_state or (case.state == "reported" and both)


def test_blindness_all_interleavings():
    n = 0
    for length in range(1, 6):
        for seq in itertools.product(OPS, repeat=length):
            _run(seq)
            n += 1
    assert n == sum(len(OPS) ** k for k in range(1, 6))
