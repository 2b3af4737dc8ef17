"""Credentials, the role policy, and field-level redaction.

Tokens are HMAC-SHA-256 signed by the central node. The policy lives in
the tables below; swapping policies means swapping these tables.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import time
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Union

from .errors import Expired, MalformedToken, MgvoError, SignatureInvalid
from .model import FIELD_REGISTRY

DEFAULT_VO = "mgvo"


class Role(str, Enum):
    CLINICIAN = "clinician"
    RESEARCHER = "researcher"
    EPIDEMIOLOGIST = "epidemiologist"
    OFFICIAL = "official"
    ADMIN = "admin"

    def __str__(self) -> str:
        return self.value


ROLES = tuple(Role)

ACTIONS = (
    "query", "count_query", "fetch_image", "apply_algorithm",
    "annotate", "second_opinion", "ingest", "vo_admin", "replicate",
)

# ------------------------------------------------------------------ policy

KEY_FIELDS = frozenset({
    "patient.pseudonym_id", "exam.exam_id", "exam.patient",
    "image.image_id", "image.exam", "image.guid",
})
CLIN_FIELDS = frozenset({
    "patient.clinical_history", "patient.family_history", "patient.hrt_use",
    "patient.parity", "patient.diet_code",
})
EPI_FIELDS = frozenset({
    "patient.age_at_exam", "patient.height_cm", "patient.weight_kg",
    "image.view", "image.laterality", "image.density",
    "acq.kvp", "acq.mas", "acq.compression_n", "acq.thickness_mm",
    "patient.site_id", "exam.site_id",
})
TECH_FIELDS = frozenset({
    "image.lfn", "image.width_px", "image.height_px", "image.bits_per_sample",
    "exam.exam_year_month",
})
# link-map fields; listed so no policy can ever name them
IDENT_FIELDS = frozenset({"patient_name", "patient_id", "birth_year"})

assert KEY_FIELDS | CLIN_FIELDS | EPI_FIELDS | TECH_FIELDS == set(FIELD_REGISTRY)

AGE_FIELD = "patient.age_at_exam"
AGE_BAND_WIDTH = 5

VISIBLE: dict[Role, frozenset] = {
    Role.CLINICIAN: KEY_FIELDS | CLIN_FIELDS | EPI_FIELDS | TECH_FIELDS,
    Role.RESEARCHER: KEY_FIELDS | EPI_FIELDS,
    Role.EPIDEMIOLOGIST: KEY_FIELDS | EPI_FIELDS,
    Role.OFFICIAL: frozenset(),
    Role.ADMIN: frozenset(),
}
BANDED_AGE = frozenset({Role.RESEARCHER, Role.EPIDEMIOLOGIST})

# fields a role may use in a WHERE clause
FILTERABLE: dict[Role, frozenset] = {
    Role.CLINICIAN: VISIBLE[Role.CLINICIAN],
    Role.RESEARCHER: VISIBLE[Role.RESEARCHER],
    Role.EPIDEMIOLOGIST: VISIBLE[Role.EPIDEMIOLOGIST],
    Role.OFFICIAL: EPI_FIELDS,
    Role.ADMIN: frozenset(),
}

ANY = None
# role -> action -> permitted resources (ANY = unrestricted)
GRANTS: dict[Role, dict[str, Optional[frozenset]]] = {
    Role.CLINICIAN: {
        "query": ANY, "count_query": ANY, "fetch_image": ANY, "apply_algorithm": ANY,
        "annotate": ANY, "second_opinion": ANY, "ingest": ANY,
    },
    Role.RESEARCHER: {"query": ANY, "count_query": ANY, "apply_algorithm": frozenset({"density"})},
    Role.EPIDEMIOLOGIST: {"query": ANY, "count_query": ANY, "apply_algorithm": frozenset({"density"})},
    Role.OFFICIAL: {"count_query": ANY},
    Role.ADMIN: {"vo_admin": ANY, "replicate": ANY},
}


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.allowed


Allow = Decision(True)


def Deny(reason: str) -> Decision:
    return Decision(False, reason)


RoleSet = Union[Role, str, Iterable[Union[Role, str]]]


def _roles(roles: RoleSet) -> frozenset:
    if isinstance(roles, (Role, str)):
        roles = [roles]
    return frozenset(Role(r) for r in roles)


def visible_fields(roles: RoleSet) -> frozenset:
    out = frozenset()
    for r in _roles(roles):
        out |= VISIBLE[r]
    return out


def filterable_fields(roles: RoleSet) -> frozenset:
    out = frozenset()
    for r in _roles(roles):
        out |= FILTERABLE[r]
    return out


def age_band(age) -> str:
    if age is None or isinstance(age, str):
        return age
    low = (age // AGE_BAND_WIDTH) * AGE_BAND_WIDTH
    return f"{low}-{low + AGE_BAND_WIDTH - 1}"


def redact(row: dict, roles: RoleSet) -> dict:
    roles = _roles(roles)
    visible = visible_fields(roles)
    out = {k: v for k, v in row.items() if k in visible}
    if AGE_FIELD in out and not any(r not in BANDED_AGE and AGE_FIELD in VISIBLE[r] for r in roles):
        out[AGE_FIELD] = age_band(out[AGE_FIELD])
    return out


def authorize(identity, action: str, resource: Optional[str] = None) -> Decision:
    """Pure policy lookup; anything not granted is denied."""
    roles = identity.roles if hasattr(identity, "roles") else _roles(identity)
    for r in _roles(roles):
        allowed = GRANTS[r].get(action, False)
        if allowed is ANY or (allowed and resource in allowed):
            return Allow
    label = f"{action}({resource})" if action == "apply_algorithm" and resource else action
    return Deny(f"{label} not granted")


# ------------------------------------------------------------------ tokens


@dataclass(frozen=True)
class Credential:
    subject: str
    vo: str
    roles: frozenset
    expiry: int
    signature: str

    @property
    def body(self) -> str:
        return token_body(self.subject, self.vo, self.roles, self.expiry)

    def wire(self) -> str:
        return base64.b64encode(f"{self.body}\n{self.signature}".encode("utf-8")).decode("ascii")


@dataclass(frozen=True)
class Identity:
    subject: str
    vo: str
    roles: frozenset
    expiry: int

    @property
    def site(self) -> Optional[str]:
        """Site of a ``name@site`` subject, else None."""
        _, at, site = self.subject.rpartition("@")
        return site if at and site else None

    def has(self, role: Role) -> bool:
        return role in self.roles


def token_body(subject: str, vo: str, roles, expiry: int) -> str:
    names = sorted(str(Role(r)) for r in roles)
    return f"{subject}|{vo}|{','.join(names)}|{expiry}"


def _sign(body: str, secret) -> str:
    if isinstance(secret, str):
        secret = secret.encode("utf-8")
    return hmac.new(secret, body.encode("utf-8"), hashlib.sha256).hexdigest()


def issue_token(subject: str, roles, expiry: int, central_secret, vo: str = DEFAULT_VO,
                now: Optional[float] = None) -> Credential:
    roles = _roles(roles) if roles else frozenset()
    if not roles:
        raise MgvoError("a credential needs at least one role")
    now = time.time() if now is None else now
    if expiry <= now:
        raise MgvoError(f"expiry {expiry} is in the past")
    if any(c in subject for c in "|\n") or not subject:
        raise MgvoError(f"invalid subject {subject!r}")
    body = token_body(subject, vo, roles, int(expiry))
    return Credential(subject, vo, roles, int(expiry), _sign(body, central_secret))


def parse_token(token: str) -> Credential:
    try:
        text = base64.b64decode(token.encode("ascii"), validate=True).decode("utf-8")
        body, signature = text.split("\n")
        subject, vo, role_text, expiry = body.split("|")
        roles = frozenset(Role(r) for r in role_text.split(","))
        cred = Credential(subject, vo, roles, int(expiry), signature)
    except (ValueError, UnicodeError, binascii.Error, AttributeError):
        raise MalformedToken("token is not a valid credential encoding") from None
    if cred.body != body:
        # non-canonical role order or spacing
        raise SignatureInvalid("token body is not canonical")
    return cred


def verify_token(token: Union[str, Credential], central_secret, now: Optional[float] = None) -> Identity:
    cred = parse_token(token) if isinstance(token, str) else token
    expected = _sign(cred.body, central_secret)
    if not hmac.compare_digest(expected, cred.signature):
        raise SignatureInvalid(f"bad signature for {cred.subject}")
    now = time.time() if now is None else now
    if now >= cred.expiry:
        raise Expired(f"credential for {cred.subject} expired at {cred.expiry}")
    return Identity(cred.subject, cred.vo, cred.roles, cred.expiry)
