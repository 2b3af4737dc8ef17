import operator
import random

import pytest
from hypothesis import given, settings, strategies as st

from mgvo.errors import Denied, NodeTimeout, NoNodesAvailable, QuerySyntaxError, TypeMismatch, UnknownField
from mgvo.model import to_record
from mgvo.query import (
    Atom,
    MemberInfo,
    QueryAst,
    check_filterable,
    execute_local,
    merge,
    parse_query,
    plan,
)
from mgvo.synth import make_cohort

# ------------------------------------------------------------------ parsing


def test_simple_query():
    ast = parse_query("SELECT images WHERE image.view = 'MLO' AND patient.age_at_exam >= 50")
    assert ast == QueryAst("images", (Atom("image.view", "=", "MLO"), Atom("patient.age_at_exam", ">=", 50)))
    assert ast.apply is None and not ast.count_only


def test_complex_query():
    ast = parse_query("SELECT images WHERE patient.age_at_exam BETWEEN 50 AND 64 APPLY density()")
    assert ast.apply == ("density", {})
    assert ast.predicate == (Atom("patient.age_at_exam", "BETWEEN", (50, 64)),)


def test_apply_params_and_count():
    ast = parse_query("select images where image.view in ('CC', 'MLO') apply cade(k=3, mode='x')")
    assert ast.apply == ("cade", {"k": "3", "mode": "x"})
    assert parse_query("SELECT patients WHERE patient.parity = 2 COUNT").count_only


def test_unknown_field():
    with pytest.raises(UnknownField) as info:
        parse_query("SELECT images WHERE image.nope = 1")
    assert str(info.value) == "image.nope" or "image.nope" in str(info.value)


@pytest.mark.parametrize("text", [
    "SELECT images WHERE image.view = 5",
    "SELECT images WHERE patient.age_at_exam = 'old'",
    "SELECT images WHERE patient.hrt_use < TRUE",
    "SELECT images WHERE patient.parity = 1.5",
])
def test_type_mismatch(text):
    with pytest.raises(TypeMismatch):
        parse_query(text)


@pytest.mark.parametrize("text,pos", [
    ("SELECT images image.view = 'CC'", 14),
    ("SELECT images WHERE image.view = 'CC' OR image.view = 'MLO'", 38),
    ("SELECT things WHERE image.view = 'CC'", 7),
    ("SELECT images WHERE image.view = 'CC' $", 38),
])
def test_syntax_error_position(text, pos):
    with pytest.raises(QuerySyntaxError) as info:
        parse_query(text)
    assert info.value.position == pos


def test_quoted_quote():
    assert parse_query("SELECT patients WHERE patient.clinical_history = 'o''brien'").predicate[0].value == "o'brien"


def test_ast_dict_round_trip():
    ast = parse_query("SELECT images WHERE acq.kvp BETWEEN 25 AND 30.5 AND image.laterality IN ('L') APPLY density()")
    assert QueryAst.from_dict(ast.to_dict()) == ast


# ------------------------------------------------------------------ planning

MEMBERS = [MemberInfo("n1", "addenbrookes"), MemberInfo("n2", "oxford"), MemberInfo("n3", "udine")]


def test_plan_broadcast():
    assert plan(parse_query("SELECT images WHERE image.view = 'CC'"), MEMBERS).targets == ["n1", "n2", "n3"]


def test_plan_site_pruning():
    p = plan(parse_query("SELECT images WHERE exam.site_id = 'udine' AND image.view = 'CC'"), MEMBERS)
    assert p.targets == ["n3"]
    assert p.sub_queries[0][1].predicate == parse_query(
        "SELECT images WHERE exam.site_id = 'udine' AND image.view = 'CC'").predicate


def test_plan_empty_membership():
    with pytest.raises(NoNodesAvailable):
        plan(parse_query("SELECT images WHERE image.view = 'CC'"), [])


def test_plan_skips_dead():
    members = MEMBERS[:2] + [MemberInfo("n3", "udine", "dead")]
    p = plan(parse_query("SELECT images WHERE image.view = 'CC'"), members)
    assert p.targets == ["n1", "n2"] and p.skipped == {"n3": "node dead"}


# ------------------------------------------------------------------ merge

def test_merge_dedups_replicated_rows():
    a = [{"image.guid": "g1", "v": 1}, {"image.guid": "g2", "v": 2}]
    b = [{"image.guid": "g1", "v": 1}]
    rs = merge({"n1": a, "n2": b})
    assert [r["image.guid"] for r in rs.rows] == ["g1", "g2"] and not rs.partial


def test_merge_error_is_partial():
    rs = merge({"n1": [{"image.guid": "g1"}], "n2": NodeTimeout("x"), "n3": Denied("no")})
    assert rs.partial and rs.rows == [{"image.guid": "g1"}]
    assert rs.per_node_status == {"n1": "ok", "n2": "timeout", "n3": "error:Denied: no"}


def test_merge_all_empty():
    rs = merge({"n1": [], "n2": []})
    assert rs.rows == [] and rs.partial is False and rs.row_count == 0


def test_merge_counts_dedup_keys():
    rs = merge({"n1": [{"count": 2, "keys": [["g1"], ["g2"]]}], "n2": [{"count": 1, "keys": [["g2"]]}]},
               count_only=True)
    assert rs.rows == [{"count": 2}]


# -------------------------------------------------------- local execution

@pytest.fixture(scope="module")
def big_store(tmp_path_factory):
    from mgvo.store import LocalStore
    data = make_cohort(1000, seed=11)
    s = LocalStore(tmp_path_factory.mktemp("q") / "s", "n1")
    for d in data.values():
        s.put_many(d.patients + d.exams + d.images)
    yield s, data
    s.close()


def _flat(prefix, rec):
    out = {}
    for k, v in rec.items():
        if k == "type":
            continue
        if k == "acquisition":
            out.update({f"acq.{a}": b for a, b in v.items()})
        else:
            out[f"{prefix}.{k}"] = v
    return out


_ORACLE_CACHE = {}


def _oracle_rows(data, entity):
    """Joined rows built straight from the record dicts."""
    if (id(data), entity) in _ORACLE_CACHE:
        return _ORACLE_CACHE[(id(data), entity)]
    pats, exams, imgs = {}, {}, []
    for d in data.values():
        for p in d.patients:
            pats[p.pseudonym_id] = _flat("patient", to_record(p))
        for e in d.exams:
            exams[e.exam_id] = {**_flat("exam", to_record(e)), **pats[e.patient]}
        for im in d.images:
            imgs.append({**_flat("image", to_record(im)), **exams[im.exam]})
    rows = {"patients": list(pats.values()), "exams": list(exams.values()), "images": imgs}[entity]
    _ORACLE_CACHE[(id(data), entity)] = rows
    return rows


OPS = {"=": operator.eq, "!=": operator.ne, "<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}

NUMERIC = {"patient.age_at_exam": (38, 79), "patient.parity": (0, 4), "acq.kvp": (25, 34),
           "acq.thickness_mm": (20, 90), "patient.height_cm": (150, 185), "acq.mas": (20, 200)}
CATEG = {"image.view": ["CC", "MLO"], "image.laterality": ["L", "R"], "patient.diet_code": list("ABCD"),
         "exam.site_id": ["addenbrookes", "oxford", "udine"]}
BOOL = ["patient.hrt_use", "patient.family_history"]


def _random_atom(rng, entity):
    pool = list(NUMERIC) + list(CATEG) + BOOL
    if entity == "patients":
        pool = [f for f in pool if f.startswith("patient.")]
    elif entity == "exams":
        pool = [f for f in pool if not f.startswith(("image.", "acq."))]
    f = rng.choice(pool)
    if f in NUMERIC:
        lo, hi = NUMERIC[f]
        if rng.random() < 0.25:
            a, b = sorted(rng.randint(lo, hi) for _ in range(2))
            return (f, "BETWEEN", (a, b))
        return (f, rng.choice(list(OPS)), rng.randint(lo, hi))
    if f in CATEG:
        if rng.random() < 0.3:
            return (f, "IN", tuple(rng.sample(CATEG[f], rng.randint(1, 2))))
        return (f, rng.choice(["=", "!="]), rng.choice(CATEG[f]))
    return (f, rng.choice(["=", "!="]), rng.random() < 0.5)


def _render(entity, atoms):
    def lit(v):
        if isinstance(v, bool):
            return "TRUE" if v else "FALSE"
        return f"'{v}'" if isinstance(v, str) else str(v)

    parts = []
    for f, op, v in atoms:
        if op == "BETWEEN":
            parts.append(f"{f} BETWEEN {lit(v[0])} AND {lit(v[1])}")
        elif op == "IN":
            parts.append(f"{f} IN ({', '.join(lit(x) for x in v)})")
        else:
            parts.append(f"{f} {op} {lit(v)}")
    return f"SELECT {entity} WHERE {' AND '.join(parts)}"


def _holds(row, f, op, v):
    x = row.get(f)
    if x is None:
        return False
    if op == "BETWEEN":
        return v[0] <= x <= v[1]
    if op == "IN":
        return x in v
    return OPS[op](x, v)


def test_execute_local_matches_brute_force(big_store):
    store, data = big_store
    rng = random.Random(99)
    keyf = {"images": lambda r: r["image.guid"], "exams": lambda r: (r["exam.site_id"], r["exam.exam_id"]),
            "patients": lambda r: (r["patient.site_id"], r["patient.pseudonym_id"])}
    nonempty = 0
    for _ in range(200):
        entity = rng.choice(["patients", "exams", "images"])
        atoms = [_random_atom(rng, entity) for _ in range(rng.randint(1, 3))]
        got = execute_local(parse_query(_render(entity, atoms)), store, ["clinician"])
        want = [r for r in _oracle_rows(data, entity) if all(_holds(r, *a) for a in atoms)]
        assert {keyf[entity](r) for r in got} == {keyf[entity](r) for r in want}
        assert sorted(got, key=keyf[entity]) == got
        assert {tuple(sorted(r.items())) for r in got} == {tuple(sorted(r.items())) for r in want}
        nonempty += bool(want)
    assert nonempty > 100  # the fuzz is not vacuous


def test_empty_store(store):
    assert execute_local(parse_query("SELECT images WHERE image.view = 'CC'"), store, ["clinician"]) == []


def test_researcher_rows_have_no_clinical_fields(big_store):
    store, _ = big_store
    rows = execute_local(parse_query("SELECT images WHERE image.view = 'CC'"), store, ["researcher"])
    assert rows
    clin = {"patient.clinical_history", "patient.family_history", "patient.hrt_use", "patient.parity",
            "patient.diet_code"}
    for r in rows:
        assert not clin & set(r)
        assert isinstance(r["patient.age_at_exam"], str) and "-" in r["patient.age_at_exam"]


def test_count_only(big_store):
    store, data = big_store
    rows = execute_local(parse_query("SELECT images WHERE image.view = 'CC' COUNT"), store, ["official"])
    assert rows[0]["count"] == sum(im.view == "CC" for d in data.values() for im in d.images)


def test_researcher_cannot_filter_on_clinical_fields():
    with pytest.raises(Denied):
        check_filterable(parse_query("SELECT images WHERE patient.parity = 1"), ["researcher"])
    check_filterable(parse_query("SELECT images WHERE patient.parity = 1"), ["clinician"])


atoms_st = st.lists(st.tuples(st.sampled_from(sorted(NUMERIC)), st.sampled_from(sorted(OPS)),
                              st.integers(0, 300)), min_size=1, max_size=4)


@settings(max_examples=100)
@given(st.sampled_from(["patients", "exams", "images"]), atoms_st, st.booleans())
def test_render_parse_round_trip(entity, atoms, count):
    text = _render(entity, atoms) + (" COUNT" if count else "")
    ast = parse_query(text)
    assert [(a.field, a.op, a.value) for a in ast.predicate] == atoms and ast.count_only == count
