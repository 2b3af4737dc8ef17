"""Query language, planning, local execution and result merging.

Grammar (keywords case-insensitive)::

    query := SELECT entity WHERE conj [APPLY ident "(" [params] ")"] [COUNT]
    conj  := atom {AND atom}
    atom  := field op literal | field BETWEEN lit AND lit | field IN "(" lit {"," lit} ")"

An atom over a missing value (NULL field, or no joined exam/image) is false.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from .errors import (
    Denied,
    MgvoError,
    NodeTimeout,
    NoNodesAvailable,
    QuerySyntaxError,
    TypeMismatch,
    UnknownField,
)
from .model import FIELD_REGISTRY, field_value
from .security import filterable_fields, redact

ENTITIES = ("patients", "exams", "images")
OPS = ("=", "!=", "<", "<=", ">", ">=", "IN", "BETWEEN")
ORDERED_OPS = ("<", "<=", ">", ">=", "BETWEEN")

# row fields per entity; an entity's row carries its own fields plus the
# fields of the records it references
ROW_ENTITIES = {
    "patients": ("patient",),
    "exams": ("exam", "patient"),
    "images": ("image", "exam", "patient"),
}
_ENTITY_TAG = {"patients": "patient", "exams": "exam", "images": "image"}


@dataclass(frozen=True)
class Atom:
    field: str
    op: str
    value: Any  # scalar, or tuple for IN / BETWEEN


@dataclass(frozen=True)
class QueryAst:
    entity: str
    predicate: tuple[Atom, ...]
    apply: Optional[tuple[str, dict]] = None
    count_only: bool = False

    @property
    def fields(self) -> set[str]:
        return {a.field for a in self.predicate}

    def to_dict(self) -> dict:
        return {
            "entity": self.entity,
            "predicate": [[a.field, a.op, list(a.value) if isinstance(a.value, tuple) else a.value]
                          for a in self.predicate],
            "apply": [self.apply[0], self.apply[1]] if self.apply else None,
            "count_only": self.count_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueryAst":
        atoms = []
        for f, op, v in d["predicate"]:
            if f not in FIELD_REGISTRY:
                raise UnknownField(f)
            if op not in OPS:
                raise QuerySyntaxError(f"unknown operator {op!r}", 0)
            atoms.append(Atom(f, op, tuple(v) if isinstance(v, list) else v))
        apply = tuple(d["apply"]) if d.get("apply") else None
        ast = cls(d["entity"], tuple(atoms), apply, bool(d.get("count_only")))
        if ast.entity not in ENTITIES:
            raise QuerySyntaxError(f"unknown entity {ast.entity!r}", 0)
        for a in ast.predicate:
            _typecheck(a)
        return ast


# ------------------------------------------------------------------ parser

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<string>'(?:[^']|'')*')
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)
  | (?P<op><=|>=|!=|=|<|>)
  | (?P<punct>[(),])
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)?)
""", re.VERBOSE)

KEYWORDS = {"SELECT", "WHERE", "AND", "APPLY", "COUNT", "IN", "BETWEEN", "TRUE", "FALSE"}


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int
    value: Any = None


def _tokenize(text: str) -> list[_Tok]:
    toks, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        raw = m.group()
        if kind == "string":
            toks.append(_Tok("lit", raw, pos, raw[1:-1].replace("''", "'")))
        elif kind == "number":
            toks.append(_Tok("lit", raw, pos, float(raw) if re.search(r"[.eE]", raw) else int(raw)))
        elif kind == "word" and raw.upper() in KEYWORDS:
            up = raw.upper()
            if up in ("TRUE", "FALSE"):
                toks.append(_Tok("lit", raw, pos, up == "TRUE"))
            else:
                toks.append(_Tok("kw", up, pos))
        elif kind != "ws":
            toks.append(_Tok(kind, raw, pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        t = self.tok
        self.i += 1
        return t

    def expect(self, kind: str, text: Optional[str] = None) -> _Tok:
        t = self.tok
        if t.kind != kind or (text is not None and t.text != text):
            want = text or kind
            raise QuerySyntaxError(f"expected {want}, found {t.text or 'end of input'!r}", t.pos)
        return self.take()

    def at(self, kind: str, text: Optional[str] = None) -> bool:
        return self.tok.kind == kind and (text is None or self.tok.text == text)

    def literal(self):
        return self.expect("lit").value

    def parse(self) -> QueryAst:
        self.expect("kw", "SELECT")
        ent = self.expect("word")
        if ent.text not in ENTITIES:
            raise QuerySyntaxError(f"unknown entity {ent.text!r}", ent.pos)
        self.expect("kw", "WHERE")
        atoms = [self.atom()]
        while self.at("kw", "AND"):
            self.take()
            atoms.append(self.atom())
        apply = None
        if self.at("kw", "APPLY"):
            kw = self.take()
            name = self.expect("word").text
            self.expect("punct", "(")
            params: dict[str, str] = {}
            if not self.at("punct", ")"):
                while True:
                    key = self.expect("word").text
                    self.expect("op", "=")
                    t = self.tok
                    if t.kind == "lit":
                        params[key] = t.text.strip("'") if t.text.startswith("'") else str(t.value)
                        self.take()
                    else:
                        params[key] = self.expect("word").text
                    if not self.at("punct", ","):
                        break
                    self.take()
            self.expect("punct", ")")
            if ent.text != "images":
                raise QuerySyntaxError("APPLY needs SELECT images", kw.pos)
            apply = (name, params)
        count = False
        if self.at("kw", "COUNT"):
            kw = self.take()
            if apply:
                raise QuerySyntaxError("COUNT cannot be combined with APPLY", kw.pos)
            count = True
        self.expect("eof")
        return QueryAst(ent.text, tuple(atoms), apply, count)

    def atom(self) -> Atom:
        ft = self.expect("word")
        name = ft.text
        if "." not in name or name.split(".")[0] not in ("patient", "exam", "image", "acq"):
            raise QuerySyntaxError(f"expected a qualified field, found {name!r}", ft.pos)
        if name not in FIELD_REGISTRY:
            raise UnknownField(name)
        if self.at("kw", "BETWEEN"):
            self.take()
            lo = self.literal()
            self.expect("kw", "AND")
            hi = self.literal()
            atom = Atom(name, "BETWEEN", (lo, hi))
        elif self.at("kw", "IN"):
            self.take()
            self.expect("punct", "(")
            vals = [self.literal()]
            while self.at("punct", ","):
                self.take()
                vals.append(self.literal())
            self.expect("punct", ")")
            atom = Atom(name, "IN", tuple(vals))
        else:
            op = self.expect("op").text
            atom = Atom(name, op, self.literal())
        _typecheck(atom)
        return atom


def _literal_ok(kind: str, v) -> bool:
    if kind == "bool":
        return isinstance(v, bool)
    if kind == "int":
        return isinstance(v, int) and not isinstance(v, bool)
    if kind == "number":
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    return isinstance(v, str)


def _typecheck(atom: Atom) -> None:
    kind = FIELD_REGISTRY[atom.field][2]
    values = atom.value if atom.op in ("IN", "BETWEEN") else (atom.value,)
    if atom.op in ("IN", "BETWEEN") and not isinstance(values, tuple):
        raise TypeMismatch(atom.field, f"{atom.op} needs a list")
    for v in values:
        if not _literal_ok(kind, v):
            raise TypeMismatch(atom.field, f"{v!r} is not a {kind}")
    if kind == "bool" and atom.op not in ("=", "!=", "IN"):
        raise TypeMismatch(atom.field, f"operator {atom.op} on a boolean")


def parse_query(text: str) -> QueryAst:
    return _Parser(text).parse()


# ------------------------------------------------------------- evaluation


def eval_atom(atom: Atom, row: dict) -> bool:
    v = row.get(atom.field)
    if v is None:
        return False
    op, lit = atom.op, atom.value
    if op == "=":
        return v == lit
    if op == "!=":
        return v != lit
    if op == "<":
        return v < lit
    if op == "<=":
        return v <= lit
    if op == ">":
        return v > lit
    if op == ">=":
        return v >= lit
    if op == "IN":
        return v in lit
    lo, hi = lit
    return lo <= v <= hi


def _flat(tag: str, obj) -> dict:
    prefix_fields = [(q, path) for q, (ent, path, _) in FIELD_REGISTRY.items() if ent == tag]
    return {q: field_value(obj, path) for q, path in prefix_fields}


def joined_rows(store, entity: str) -> list[dict]:
    """All rows of ``entity`` with referenced records flattened in.

    A patient without exams still yields a patient row; joined fields are
    simply absent. Cached until the store changes.
    """
    key = ("rows", entity, store.version)
    with store.lock:
        cached = store.cache.get(key)
        if cached is not None:
            return cached
        pats = {p.pseudonym_id: _flat("patient", p) for p in store.patients.values()}
        exams = {e.exam_id: {**_flat("exam", e), **pats.get(e.patient, {})}
                 for e in store.exams.values()}
        if entity == "patients":
            rows = list(pats.values())
        elif entity == "exams":
            rows = list(exams.values())
        else:
            rows = [{**_flat("image", im), **exams.get(im.exam, {})} for im in store.images.values()]
        store.cache[key] = rows
        return rows


def row_key(entity: str, row: dict) -> tuple:
    if entity == "images":
        return (row["image.guid"],)
    if entity == "exams":
        return (row["exam.site_id"], row["exam.exam_id"])
    return (row["patient.site_id"], row["patient.pseudonym_id"])


def check_filterable(ast: QueryAst, roles) -> None:
    allowed = filterable_fields(roles)
    for f in sorted(ast.fields):
        if f not in allowed:
            raise Denied(f"field {f} not available to this role")


def select(ast: QueryAst, store) -> list[dict]:
    """Unredacted matching rows, in store order."""
    return [r for r in joined_rows(store, ast.entity) if all(eval_atom(a, r) for a in ast.predicate)]


def execute_local(ast: QueryAst, store, roles) -> list[dict]:
    """Evaluate at this node and redact every row before it leaves.

    A count query yields a single row carrying the count and the merge
    keys, so replicated records can be de-duplicated by the merger.
    """
    rows = select(ast, store)
    if ast.count_only:
        keys = sorted({row_key(ast.entity, r) for r in rows})
        return [{"count": len(keys), "keys": [list(k) for k in keys]}]
    rows = sorted(rows, key=lambda r: row_key(ast.entity, r))
    return [redact(r, roles) for r in rows]


# ------------------------------------------------------------------ plan


@dataclass(frozen=True)
class MemberInfo:
    node_id: str
    site_id: str
    status: str = "live"


@dataclass
class QueryPlan:
    sub_queries: list[tuple[str, QueryAst]]
    skipped: dict[str, str] = field(default_factory=dict)  # node_id -> reason

    @property
    def targets(self) -> list[str]:
        return [n for n, _ in self.sub_queries]


def pruned_sites(ast: QueryAst) -> Optional[set[str]]:
    sites = None
    for a in ast.predicate:
        if a.field in ("exam.site_id", "patient.site_id") and a.op == "=":
            sites = {a.value} if sites is None else sites & {a.value}
    return sites


def plan(ast: QueryAst, membership: Iterable) -> QueryPlan:
    members = sorted(membership, key=lambda m: m.node_id)
    if not members:
        raise NoNodesAvailable("VO membership is empty")
    sites = pruned_sites(ast)
    wanted = [m for m in members if sites is None or m.site_id in sites]
    subs = [(m.node_id, ast) for m in wanted if m.status != "dead"]
    skipped = {m.node_id: "node dead" for m in wanted if m.status == "dead"}
    if not subs and not skipped and sites is None:
        raise NoNodesAvailable("no data nodes")
    return QueryPlan(subs, skipped)


# ----------------------------------------------------------------- merge


@dataclass
class ResultSet:
    rows: list[dict]
    per_node_status: dict[str, str]
    partial: bool

    @property
    def row_count(self) -> int:
        return len(self.rows)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "per_node_status": dict(sorted(self.per_node_status.items())),
            "partial": self.partial,
            "row_count": self.row_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResultSet":
        return cls(d["rows"], d["per_node_status"], d["partial"])


def status_ok(status: str) -> bool:
    return status == "ok"


def merge(partials: dict[str, Any], entity: str = "images", count_only: bool = False,
          skipped: Optional[dict[str, str]] = None, key_fn=None) -> ResultSet:
    """Combine per-node answers into one result.

    ``partials`` maps node_id to a row list, or to an exception / status
    string when the node failed. Rows are de-duplicated by merge key (first
    node in node_id order wins) and sorted by it.
    """
    status: dict[str, str] = {}
    for node, why in (skipped or {}).items():
        status[node] = f"error:{why}"
    key_fn = key_fn or (lambda r: row_key(entity, r))
    seen: dict[tuple, dict] = {}
    count_keys: set[tuple] = set()
    for node in sorted(partials):
        result = partials[node]
        if isinstance(result, list):
            status[node] = "ok"
            for r in result:
                if count_only:
                    count_keys.update(tuple(k) for k in r["keys"])
                else:
                    seen.setdefault(key_fn(r), r)
        else:
            status[node] = describe_failure(result)
    if count_only:
        rows = [{"count": len(count_keys)}]
    else:
        rows = [seen[k] for k in sorted(seen)]
    partial = any(not status_ok(s) for s in status.values())
    return ResultSet(rows, status, partial)


def describe_failure(result) -> str:
    if isinstance(result, NodeTimeout):
        return "timeout"
    if isinstance(result, MgvoError):
        return f"error:{result.code}: {result}"
    if isinstance(result, BaseException):
        return f"error:{type(result).__name__}: {result}"
    return str(result)
