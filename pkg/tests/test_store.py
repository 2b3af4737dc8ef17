import json
import os
import random

import pytest

from mgvo.errors import InvalidLfn, LfnConflict, NoLocalReplica, NotFound
from mgvo.store import LocalStore, guid_for, sha256_hex
from mgvo.synth import make_cohort


def reg(cat, lfn, blob, node="n1"):
    return cat.register(lfn, guid_for(blob), len(blob), sha256_hex(blob), (node, f"blobs/{guid_for(blob)}"))


def test_register_lookup(store):
    e = reg(store.catalogue, "/mgvo/a/p/e/i.img", b"x")
    assert store.catalogue.lookup("/mgvo/a/p/e/i.img") == e
    assert e.guid == e.checksum[:32]


def test_lfn_conflict(store):
    reg(store.catalogue, "/mgvo/a/p/e/i.img", b"x")
    with pytest.raises(LfnConflict):
        reg(store.catalogue, "/mgvo/a/p/e/i.img", b"y")


def test_same_lfn_same_guid_adds_replica(store):
    reg(store.catalogue, "/mgvo/a/p/e/i.img", b"x")
    e = reg(store.catalogue, "/mgvo/a/p/e/i.img", b"x", node="n2")
    assert len(e.replicas) == 2


@pytest.mark.parametrize("lfn", ["relative/path", "/mgvo//x", "/other/x", "/mgvo/a/../b", "/mgvo/"])
def test_invalid_lfn(store, lfn):
    with pytest.raises(InvalidLfn):
        reg(store.catalogue, lfn, b"x")


def test_lookup_unknown(store):
    with pytest.raises(NotFound):
        store.catalogue.lookup("/mgvo/none")


def test_whereis_and_add_replica(store):
    cat = store.catalogue
    e = reg(cat, "/mgvo/a/p/e/i.img", b"x", node="n5")
    assert cat.whereis(e.guid) == [("n5", f"blobs/{e.guid}")]
    cat.add_replica(e.guid, "n2", "blobs/other")
    assert cat.whereis(e.guid) == [("n2", "blobs/other"), ("n5", f"blobs/{e.guid}")]
    assert len(cat.lookup(e.lfn).replicas) == 2
    before = cat.lookup(e.lfn)
    assert cat.add_replica(e.guid, "n2", "blobs/other") == before
    with pytest.raises(NotFound):
        cat.whereis("f" * 32)
    with pytest.raises(NotFound):
        cat.add_replica("f" * 32, "n1", "p")


def test_ls(store):
    cat = store.catalogue
    reg(cat, "/mgvo/b/p/e/1.img", b"1")
    reg(cat, "/mgvo/a/p/e/2.img", b"2")
    reg(cat, "/mgvo/a/q/e/3.img", b"3")
    assert [e.lfn for e in cat.ls("/mgvo/")] == ["/mgvo/a/p/e/2.img", "/mgvo/a/q/e/3.img", "/mgvo/b/p/e/1.img"]
    assert [e.lfn for e in cat.ls("/mgvo/b/")] == ["/mgvo/b/p/e/1.img"]
    assert cat.ls("/mgvo/zzz") == []


def test_verify(store):
    blob = os.urandom(1000)
    guid = store.put_blob(blob)
    reg(store.catalogue, "/mgvo/a/p/e/i.img", blob)
    assert store.catalogue.verify(guid)
    path = store.blob_path(guid)
    data = bytearray(path.read_bytes())
    data[500] ^= 0xFF
    path.write_bytes(bytes(data))
    assert not store.catalogue.verify(guid)


def test_verify_remote_only(store):
    e = reg(store.catalogue, "/mgvo/a/p/e/i.img", b"x", node="elsewhere")
    with pytest.raises(NoLocalReplica):
        store.catalogue.verify(e.guid)


def test_blob_round_trip(store):
    blob = random.Random(0).randbytes(1 << 20)
    guid = store.put_blob(blob)
    assert store.get_blob(guid) == blob
    assert store.put_blob(blob) == guid
    assert len(list(store.blob_dir.iterdir())) == 1
    with pytest.raises(NotFound):
        store.get_blob("0" * 32)


def test_reopen_equals_before(tmp_path):
    data = make_cohort(60, seed=4)
    with LocalStore(tmp_path / "s", "n1") as s:
        for d in data.values():
            s.put_many(d.patients + d.exams + d.images)
            for im in d.images:
                s.put_blob(d.blobs[im.guid])
                reg(s.catalogue, im.lfn, d.blobs[im.guid])
        s.put({"type": "case", "case_id": "n1.0001", "state": "open"})
        before = s.snapshot()
    with LocalStore(tmp_path / "s", "n1") as s:
        assert s.snapshot() == before


def test_catalogue_totality(tmp_path):
    from mgvo.node import GridBox
    from mgvo.synth import load_site
    data = make_cohort(30, seed=2)
    with LocalStore(tmp_path / "s", "n1") as s:
        box = GridBox("n1", "addenbrookes", s, transport=None, node_secret=b"k", vo_secret=b"v")
        load_site(box, data["addenbrookes"])
        for im in s.images.values():
            assert s.catalogue.lookup(im.lfn).guid == im.guid


# ------------------------------------------------------------ crash replay

def _oracle(lines):
    """Independent index model: last record per key wins."""
    keys = {"patient": ("site_id", "pseudonym_id"), "exam": ("site_id", "exam_id"), "image": ("guid",)}
    idx = {"patient": {}, "exam": {}, "image": {}, "case": {}}
    for line in lines:
        rec = json.loads(line)
        k = tuple(rec[f] for f in keys.get(rec["type"], ("case_id",)))
        idx[rec["type"]][k] = rec
    return idx


def _store_index(s):
    from mgvo.model import to_record
    return {
        "patient": {k: to_record(v) for k, v in s.patients.items()},
        "exam": {k: to_record(v) for k, v in s.exams.items()},
        "image": {(k,): to_record(v) for k, v in s.images.items()},
        "case": {(k,): v for k, v in s.other.get("case", {}).items()},
    }


def test_crash_replay_every_prefix(tmp_path):
    data = make_cohort(12, seed=9)
    src = tmp_path / "src"
    rng = random.Random(5)
    with LocalStore(src, "n1") as s:
        for d in data.values():
            for obj in d.patients + d.exams + d.images:
                s.put(obj)
            if rng.random() < 0.5:
                s.put({"type": "case", "case_id": f"c{rng.randint(0, 3)}", "state": rng.choice(["open", "reported"])})
    log = (src / "meta.log").read_bytes()
    lines = log.split(b"\n")[:-1]
    cuts = set()
    offset = 0
    for line in lines:
        cuts.update({offset, offset + 1, offset + len(line) // 2, offset + len(line)})
        offset += len(line) + 1
    cuts.add(len(log))
    for n, cut in enumerate(sorted(cuts)):
        d = tmp_path / f"crash{n}"
        d.mkdir()
        (d / "meta.log").write_bytes(log[:cut])
        complete = log[:cut].split(b"\n")[:-1]
        with LocalStore(d, "n1") as s:
            assert _store_index(s) == _oracle(complete), f"cut at byte {cut}"
            s.put({"type": "case", "case_id": "after", "state": "open"})
        # torn tail was dropped, so the new record is intact on the next replay
        with LocalStore(d, "n1") as s:
            assert s.other["case"]["after"]["state"] == "open"


def test_crash_replay_catalogue(tmp_path):
    src = tmp_path / "src"
    with LocalStore(src, "n1") as s:
        for i in range(8):
            e = reg(s.catalogue, f"/mgvo/a/p/e/{i}.img", bytes([i]))
            if i % 2:
                s.catalogue.add_replica(e.guid, "n0", "x")
    log = (src / "catalogue.log").read_bytes()
    for cut in range(0, len(log) + 1, 7):
        d = tmp_path / f"c{cut}"
        d.mkdir()
        (d / "catalogue.log").write_bytes(log[:cut])
        complete = [json.loads(x) for x in log[:cut].split(b"\n")[:-1]]
        expected = {}
        for op in complete:
            if op["op"] == "register":
                expected[op["entry"]["guid"]] = [tuple(r) for r in op["entry"]["replicas"]]
            else:
                expected[op["guid"]].append((op["node_id"], op["path"]))
        with LocalStore(d, "n1") as s:
            got = {e.guid: list(e.replicas) for e in s.catalogue.entries()}
            assert got == expected


def test_read_only_open_leaves_torn_tail_and_refuses_writes(tmp_path):
    from mgvo.errors import StorageError
    s = LocalStore(tmp_path / "ro", "n1")
    s.catalogue.register("/mgvo/a/x.img", "a" * 32, 1, "a" * 64, ("n1", "blobs/x"))
    s.close()
    path = tmp_path / "ro" / "catalogue.log"
    with open(path, "ab") as fh:
        fh.write(b'{"op":"regi')  # a writer mid-append
    before = path.read_bytes()
    ro = LocalStore(tmp_path / "ro", "n1", read_only=True)
    assert [e.lfn for e in ro.catalogue.ls("/mgvo/")] == ["/mgvo/a/x.img"]
    assert path.read_bytes() == before
    assert ro.links == []
    with pytest.raises(StorageError):
        ro.catalogue.register("/mgvo/a/y.img", "b" * 32, 1, "b" * 64, ("n1", "blobs/y"))
    with pytest.raises(StorageError):
        ro.put_blob(b"x")
    ro.close()
    with pytest.raises(StorageError):
        LocalStore(tmp_path / "absent", "n1", read_only=True)
    assert not (tmp_path / "absent").exists()
