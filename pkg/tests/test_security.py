import base64
import hashlib

import pytest
from hypothesis import given, strategies as st

from mgvo.errors import Expired, MalformedToken, MgvoError, SignatureInvalid
from mgvo.model import FIELD_REGISTRY
from mgvo.security import (
    ACTIONS,
    Role,
    age_band,
    authorize,
    issue_token,
    parse_token,
    redact,
    token_body,
    verify_token,
    visible_fields,
)

# hand-rolled HMAC-SHA-256(b"central", "ruth|mgvo|clinician|1735689600")
RUTH_SIGNATURE = "8ccdd07c73c5ded89bebe19125a4fb0909ff1e11522a3708328ca1beb4eae944"


def hmac_sha256(key: bytes, msg: bytes) -> str:
    key = key.ljust(64, b"\0")
    inner = hashlib.sha256(bytes(k ^ 0x36 for k in key) + msg).digest()
    return hashlib.sha256(bytes(k ^ 0x5C for k in key) + inner).hexdigest()


def test_token_golden():
    cred = issue_token("ruth", {"clinician"}, 1735689600, b"central", now=0)
    assert cred.body == "ruth|mgvo|clinician|1735689600"
    assert hmac_sha256(b"central", cred.body.encode()) == RUTH_SIGNATURE
    assert cred.signature == RUTH_SIGNATURE
    assert base64.b64decode(cred.wire()).decode() == f"{cred.body}\n{RUTH_SIGNATURE}"


def test_roles_sorted_in_body():
    assert token_body("x", "mgvo", ["researcher", "clinician"], 5) == "x|mgvo|clinician,researcher|5"


def test_round_trip():
    tok = issue_token("ruth@udine", ["clinician"], 2000, "k", now=0).wire()
    ident = verify_token(tok, "k", now=1000)
    assert ident.roles == {Role.CLINICIAN} and ident.site == "udine"


def test_wrong_secret():
    tok = issue_token("ruth", ["clinician"], 2000, "k", now=0).wire()
    with pytest.raises(SignatureInvalid):
        verify_token(tok, "other", now=0)


def test_expired():
    tok = issue_token("ruth", ["clinician"], 2000, "k", now=0).wire()
    with pytest.raises(Expired):
        verify_token(tok, "k", now=2000)


def test_tampered_roles():
    cred = issue_token("res", ["researcher"], 2000, "k", now=0)
    forged = base64.b64encode(f"res|mgvo|clinician|2000\n{cred.signature}".encode()).decode()
    with pytest.raises(SignatureInvalid):
        verify_token(forged, "k", now=0)


@pytest.mark.parametrize("field", ["subject", "vo", "expiry"])
def test_any_altered_field_fails(field):
    cred = issue_token("ruth", ["clinician"], 2000, "k", now=0)
    parts = {"subject": "ruth", "vo": "mgvo", "roles": "clinician", "expiry": "2000"}
    parts[field] = {"subject": "eve", "vo": "other", "expiry": "9999"}[field]
    body = "|".join(parts[k] for k in ("subject", "vo", "roles", "expiry"))
    with pytest.raises(SignatureInvalid):
        verify_token(base64.b64encode(f"{body}\n{cred.signature}".encode()).decode(), "k", now=0)


@pytest.mark.parametrize("token", ["", "!!!", base64.b64encode(b"no-newline").decode(),
                                   base64.b64encode(b"a|b|c\nsig").decode(),
                                   base64.b64encode(b"a|mgvo|wizard|5\nsig").decode()])
def test_malformed(token):
    with pytest.raises(MalformedToken):
        parse_token(token)


def test_issue_errors():
    with pytest.raises(MgvoError):
        issue_token("x", [], 2000, "k", now=0)
    with pytest.raises(MgvoError):
        issue_token("x", ["clinician"], 10, "k", now=100)


# --------------------------------------------------------------- policy

C, R, E, O, A = "clinician", "researcher", "epidemiologist", "official", "admin"
# expected outcome for every (role, action); written out by hand
EXPECTED_ACTIONS = {
    C: {"query", "count_query", "fetch_image", "apply_algorithm", "annotate", "second_opinion", "ingest"},
    R: {"query", "count_query", "apply_algorithm"},
    E: {"query", "count_query", "apply_algorithm"},
    O: {"count_query"},
    A: {"vo_admin", "replicate"},
}


@pytest.mark.parametrize("role", [C, R, E, O, A])
@pytest.mark.parametrize("action", ACTIONS)
def test_action_matrix_total(role, action):
    d = authorize([role], action, "density" if action == "apply_algorithm" else None)
    assert bool(d) == (action in EXPECTED_ACTIONS[role])
    if not d:
        assert d.reason


@pytest.mark.parametrize("role,alg,ok", [
    (C, "density", True), (C, "cade", True), (R, "density", True), (R, "cade", False),
    (E, "cade", False), (O, "density", False), (A, "density", False),
])
def test_algorithm_grants(role, alg, ok):
    assert bool(authorize([role], "apply_algorithm", alg)) == ok


def test_named_denials():
    assert authorize([R], "fetch_image", "/mgvo/x").reason == "fetch_image not granted"
    assert not authorize([A], "query", "patients")
    assert authorize([C], "apply_algorithm", "cade")
    assert authorize([R], "apply_algorithm", "cade").reason == "apply_algorithm(cade) not granted"


CLIN = {"patient.clinical_history", "patient.family_history", "patient.hrt_use", "patient.parity",
        "patient.diet_code"}
EPI = {"patient.age_at_exam", "patient.height_cm", "patient.weight_kg", "image.view", "image.laterality",
       "image.density", "acq.kvp", "acq.mas", "acq.compression_n", "acq.thickness_mm",
       "patient.site_id", "exam.site_id"}
KEYS = {"patient.pseudonym_id", "exam.exam_id", "exam.patient", "image.image_id", "image.exam", "image.guid"}
TECH = {"image.lfn", "image.width_px", "image.height_px", "image.bits_per_sample", "exam.exam_year_month"}


def _expected_visible(role, field):
    if role == C:
        return True
    if role in (R, E):
        return field in EPI or field in KEYS
    return False


@pytest.mark.parametrize("role", [C, R, E, O, A])
@pytest.mark.parametrize("field", sorted(FIELD_REGISTRY))
def test_visibility_matrix(role, field):
    assert KEYS | CLIN | EPI | TECH == set(FIELD_REGISTRY)
    row = {field: 54}
    assert (field in redact(row, [role])) == _expected_visible(role, field)


def test_ident_visible_to_nobody():
    for role in (C, R, E, O, A):
        assert not {"patient_name", "patient_id", "birth_year"} & visible_fields([role])


def test_redact_examples():
    row = {"patient.clinical_history": "cyst", "patient.age_at_exam": 54, "image.view": "CC"}
    assert redact(row, [C]) == row
    assert redact(row, [R]) == {"patient.age_at_exam": "50-54", "image.view": "CC"}
    assert redact(row, [O]) == {}


@pytest.mark.parametrize("age,band", [(0, "0-4"), (49, "45-49"), (50, "50-54"), (54, "50-54"), (55, "55-59")])
def test_age_band(age, band):
    assert age_band(age) == band


rows = st.dictionaries(st.sampled_from(sorted(FIELD_REGISTRY)), st.one_of(st.integers(0, 120), st.text(max_size=5)))


@given(rows, st.sampled_from([C, R, E, O, A]))
def test_redact_idempotent(row, role):
    assert redact(redact(row, [role]), [role]) == redact(row, [role])


@given(rows)
def test_redact_monotone(row):
    assert set(redact(row, [R])) <= set(redact(row, [C]))
    assert visible_fields([R]) <= visible_fields([C])
