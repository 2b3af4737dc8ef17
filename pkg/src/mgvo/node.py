"""Grid-box: one site's services, reachable over any transport.

The same object plays two parts. As a *server* it answers frames from
peers (sub-queries, jobs, image chunks, case traffic). As a *coordinator*
it runs a user's federated request by shipping work to the nodes that
hold the data and merging what comes back.
"""

from __future__ import annotations

import base64
import hashlib
import itertools
import logging
import time
from typing import Callable, Optional

from . import analysis
from .collab import CaseBook, blind_view, owner_of
from .errors import (
    ChecksumMismatch,
    Denied,
    MgvoError,
    NoNodesAvailable,
    NotFound,
    SameSite,
)
from .ingest import ingest_case
from .mgif import parse_mgif
from .model import from_record, to_record
from .query import (
    MemberInfo,
    QueryAst,
    ResultSet,
    check_filterable,
    describe_failure,
    execute_local,
    merge,
    parse_query,
    plan,
    select,
)
from .security import Identity, authorize, verify_token
from .store import LocalStore, sha256_hex
from .wire import CHUNK_SIZE, Message, MsgType

log = logging.getLogger(__name__)

CENTRAL = "central"
DEFAULT_TIMEOUT = 5.0


def _ack(msg_type: MsgType, **body) -> list[Message]:
    return [Message(msg_type, {"ack": True, **body})]


def site_of_lfn(lfn: str) -> str:
    parts = lfn.split("/")
    if len(parts) < 4 or parts[1] != "mgvo":
        raise NotFound(f"not a catalogue name: {lfn!r}")
    return parts[2]


class GridBox:
    def __init__(self, node_id: str, site_id: str, store: LocalStore, transport,
                 node_secret, vo_secret, node_token: str = "", address: str = "",
                 central: str = CENTRAL, clock: Optional[Callable[[], float]] = None,
                 timeout: float = DEFAULT_TIMEOUT):
        self.node_id = node_id
        self.site_id = site_id
        self.store = store
        self.transport = transport
        self.node_secret = node_secret.encode() if isinstance(node_secret, str) else node_secret
        self.vo_secret = vo_secret
        self.node_token = node_token
        self.address = address or node_id
        self.central = central
        self.clock = clock or time.time
        self.timeout = timeout
        self.members: list[dict] = []
        self.jobs: dict[str, analysis.Job] = {}
        self.casebook = CaseBook(store, node_id, self.clock)
        self._seq = itertools.count(1)

    # ------------------------------------------------------------ plumbing

    def _call(self, dst: str, msg_type: MsgType, body: dict) -> list[Message]:
        # a forwarded body must not carry the original request's id
        body = {k: v for k, v in body.items() if k not in ("request_id", "reply_to")}
        return self.transport.call(self.node_id, dst, msg_type, body, self.timeout)

    def _scatter(self, requests: dict) -> dict:
        return self.transport.scatter(self.node_id, requests, self.timeout)

    def identify(self, token: str) -> Identity:
        return verify_token(token, self.vo_secret, self.clock())

    @staticmethod
    def require(identity: Identity, action: str, resource: Optional[str] = None) -> None:
        decision = authorize(identity, action, resource)
        if not decision:
            raise Denied(decision.reason)

    # ------------------------------------------------------------ VO

    def register(self) -> list[dict]:
        body = {"token": self.node_token, "node_id": self.node_id, "site_id": self.site_id,
                "address": self.address, "algorithms": sorted(analysis.ALGORITHMS)}
        replies = self._call(self.central, MsgType.REGISTER, body)
        self._learn(replies[-1].body["membership"])
        return self.members

    def heartbeat_body(self) -> dict:
        return {"token": self.node_token, "node_id": self.node_id}

    def on_heartbeat_reply(self, replies: list[Message]) -> None:
        if replies and replies[-1].msg_type == MsgType.HEARTBEAT:
            self._learn(replies[-1].body["membership"])

    def refresh_membership(self) -> list[dict]:
        try:
            replies = self._call(self.central, MsgType.HEARTBEAT, self.heartbeat_body())
            self._learn(replies[-1].body["membership"])
        except MgvoError as exc:
            log.warning("%s: membership refresh failed (%s); using cached view", self.node_id, exc)
        return self.members

    def _learn(self, members: list[dict]) -> None:
        self.members = members
        learn = getattr(self.transport, "learn", None)
        if learn:
            for m in members:
                learn(m["node_id"], m["address"])

    def member_infos(self) -> list[MemberInfo]:
        return [MemberInfo(m["node_id"], m["site_id"], m["status"]) for m in self.members]

    def live_nodes(self) -> list[str]:
        return sorted(m["node_id"] for m in self.members if m["status"] != "dead")

    def nodes_of_site(self, site: str) -> list[str]:
        return sorted(m["node_id"] for m in self.members if m["site_id"] == site and m["status"] != "dead")

    # ------------------------------------------------------------ local data

    def ingest(self, data: bytes) -> tuple[str, str]:
        return ingest_case(parse_mgif(data), self.store, self.site_id, self.node_secret, self.clock)

    def load_image(self, image, blob: bytes) -> None:
        """Import an already-anonymized image and catalogue its blob."""
        with self.store.lock:
            if self.store.put_blob(blob) != image.guid:
                raise ChecksumMismatch(f"blob does not hash to {image.guid}")
            self.store.put(image)
            self.store.catalogue.register(image.lfn, image.guid, len(blob), sha256_hex(blob),
                                          (self.node_id, self.store.relative_blob_path(image.guid)))

    # ------------------------------------------------------------ queries

    def run_query(self, text: str, token: str) -> ResultSet:
        identity = self.identify(token)
        ast = parse_query(text)
        self.require(identity, "count_query" if ast.count_only else "query")
        if ast.apply:
            self.require(identity, "apply_algorithm", ast.apply[0])
            analysis.check_params(*ast.apply)
        check_filterable(ast, identity.roles)
        self.refresh_membership()
        if not self.members:
            raise NoNodesAvailable("no VO membership known")
        qplan = plan(ast, self.member_infos())
        if ast.apply:
            return self._run_apply(ast, qplan, token, identity)
        requests = {node: (MsgType.SUBQUERY_REQUEST, {"token": token, "query": ast.to_dict(), "mode": "rows"})
                    for node, _ in qplan.sub_queries}
        partials = {}
        for node, result in self._scatter(requests).items():
            partials[node] = result if isinstance(result, Exception) else result[-1].body["rows"]
        return merge(partials, ast.entity, ast.count_only, qplan.skipped)

    def _run_apply(self, ast: QueryAst, qplan, token: str, identity: Identity) -> ResultSet:
        algorithm, params = ast.apply
        requests = {node: (MsgType.SUBQUERY_REQUEST, {"token": token, "query": ast.to_dict(), "mode": "select"})
                    for node, _ in qplan.sub_queries}
        status = {node: f"error:{why}" for node, why in qplan.skipped.items()}
        replicas: dict[str, set] = {}
        for node, result in self._scatter(requests).items():
            if isinstance(result, Exception):
                status[node] = describe_failure(result)
                continue
            status[node] = "ok"
            for guid, reps in result[-1].body["selection"]:
                replicas.setdefault(guid, set()).update(tuple(r) for r in reps)
        responsive = [n for n in self.live_nodes() if status.get(n, "ok") == "ok"]
        jobs = analysis.schedule_jobs(sorted(replicas.items()), algorithm, responsive,
                                      job_prefix=f"{self.node_id}-{next(self._seq)}",
                                      submitted_by=identity.subject, params=params)
        submits = {j.node_id: (MsgType.JOB_SUBMIT, {"token": token, "job": j.to_dict()}) for j in jobs}
        finished = []
        for node, result in self._scatter(submits).items():
            if isinstance(result, Exception):
                status[node] = describe_failure(result)
            else:
                finished.append(analysis.Job.from_dict(result[-1].body["job"]))
        rows, job_status = analysis.collect(finished)
        for node, s in job_status.items():
            if status.get(node, "ok") == "ok":
                status[node] = s
        partial = any(s != "ok" for s in status.values())
        return ResultSet(rows, status, partial)

    # ------------------------------------------------------------ images

    def _chunks(self, lfn: str, guid: str, checksum: str, blob: bytes) -> list[Message]:
        total = max(1, -(-len(blob) // CHUNK_SIZE))
        return [
            Message(MsgType.IMAGE_CHUNK, {
                "lfn": lfn, "guid": guid, "checksum": checksum, "seq": i, "total": total,
                "last": i == total - 1,
                "data": base64.b64encode(blob[i * CHUNK_SIZE:(i + 1) * CHUNK_SIZE]).decode("ascii"),
            })
            for i in range(total)
        ]

    @staticmethod
    def _reassemble(replies: list[Message], checksum: str) -> bytes:
        chunks = sorted((m for m in replies if m.msg_type == MsgType.IMAGE_CHUNK), key=lambda m: m.body["seq"])
        data = b"".join(base64.b64decode(m.body["data"]) for m in chunks)
        if hashlib.sha256(data).hexdigest() != checksum:
            raise ChecksumMismatch(f"{chunks[0].body['lfn'] if chunks else '?'}: received bytes do not match the catalogue checksum")
        return data

    def resolve(self, lfn: str, token: str) -> dict:
        """Catalogue entry for ``lfn``, from here or from the owning site."""
        try:
            return self.store.catalogue.lookup(lfn).to_dict()
        except NotFound:
            pass
        site = site_of_lfn(lfn)
        if not self.members:
            self.refresh_membership()
        owners = self.nodes_of_site(site)
        if not owners:
            raise NotFound(f"no live node for site {site}")
        replies = self._call(owners[0], MsgType.FETCH_IMAGE, {"token": token, "lfn": lfn, "resolve": True})
        return replies[-1].body["entry"]

    def fetch_image(self, lfn: str, token: str) -> bytes:
        identity = self.identify(token)
        self.require(identity, "fetch_image")
        self.refresh_membership()
        entry = self.resolve(lfn, token)
        live = set(self.live_nodes()) | {self.node_id}
        holders = sorted(n for n, _ in entry["replicas"] if n in live)
        if not holders:
            raise NotFound(f"no live replica of {lfn}")
        replies = self._call(holders[0], MsgType.FETCH_IMAGE, {"token": token, "lfn": lfn})
        return self._reassemble(replies, entry["checksum"])

    def replicate_to(self, guid: str, target: str) -> dict:
        """Operator action: copy one image (blob + anonymized records) to ``target``."""
        entry = self.store.catalogue.by_guid(guid)
        image = self.store.images[guid]
        exam = next(e for e in self.store.exams.values() if e.exam_id == image.exam)
        patient = next(p for p in self.store.patients.values() if p.pseudonym_id == exam.patient)
        body = {
            "token": self.node_token, "op": "replicate", "source": self.node_id,
            "entry": entry.to_dict(), "records": [to_record(patient), to_record(exam), to_record(image)],
        }
        replies = self._call(target, MsgType.INGEST, body)
        path = replies[-1].body["path"]
        return self.store.catalogue.add_replica(guid, target, path).to_dict()

    # ------------------------------------------------------------ second opinion

    def _owner_node(self, lfn: str) -> str:
        try:
            if self.store.catalogue.lookup(lfn).guid in self.store.images:
                return self.node_id
        except NotFound:
            pass
        if not self.members:
            self.refresh_membership()
        owners = self.nodes_of_site(site_of_lfn(lfn))
        if not owners:
            raise NotFound(f"no live node owns {lfn}")
        return owners[0]

    def _so_call(self, owner: str, body: dict) -> dict:
        if owner == self.node_id:
            return self._so_local(body)
        msg_type = MsgType.ANNOTATION_PUSH if body["op"] == "annotate" else MsgType.SECOND_OPINION_REQUEST
        return self._call(owner, msg_type, body)[-1].body

    def request_second_opinion(self, lfn: str, target_site: str, token: str) -> dict:
        identity = self.identify(token)
        self.require(identity, "second_opinion")
        if identity.site == target_site:
            raise SameSite(target_site)
        owner = self._owner_node(lfn)
        return self._so_call(owner, {"token": token, "op": "create", "lfn": lfn, "target_site": target_site})["case"]

    def submit_annotation(self, case_id: str, region, label: str, token: str, note: str = "") -> dict:
        body = {"token": token, "op": "annotate", "case_id": case_id,
                "region": [list(v) for v in region], "label": label, "note": note}
        return self._so_call(owner_of(case_id), body)["case"]

    def get_case(self, case_id: str, token: str) -> dict:
        return self._so_call(owner_of(case_id), {"token": token, "op": "get", "case_id": case_id})["case"]

    def combined_report(self, case_id: str, token: str) -> dict:
        return self._so_call(owner_of(case_id), {"token": token, "op": "report", "case_id": case_id})["report"]

    def list_cases(self, token: str) -> list[dict]:
        identity = self.identify(token)
        self.require(identity, "second_opinion")
        out = {c["case_id"]: c for c in self.casebook.list_for(identity)}
        for notice in self.store.records("case_notice").values():
            if notice["target_site"] == identity.site and notice["case_id"] not in out:
                out[notice["case_id"]] = {k: v for k, v in notice.items() if k != "type"}
        return [out[k] for k in sorted(out)]

    def _so_local(self, body: dict) -> dict:
        """Case operations executed at the node that owns the case."""
        identity = self.identify(body["token"])
        op = body["op"]
        if op == "create":
            entry = self.store.catalogue.lookup(body["lfn"])
            image = self.store.images.get(entry.guid)
            if image is None:
                raise NotFound(body["lfn"])
            case = self.casebook.create(image, identity, body["target_site"])
            self._notify(case.summary())
            return {"case": case.summary()}
        case_id = body["case_id"]
        if op == "annotate":
            case = self.casebook.cases.get(case_id)
            image = self.store.images.get(case.guid) if case else None
            bounds = (image.width_px, image.height_px) if image else None
            case = self.casebook.submit(case_id, identity, body["region"], body["label"],
                                        body.get("note", ""), bounds)
            return {"case": blind_view(case, identity.subject)}
        if op == "get":
            return {"case": self.casebook.view(case_id, identity)}
        if op == "report":
            return {"report": self.casebook.report(case_id, identity)}
        raise NotFound(f"unknown second-opinion operation {op!r}")

    def _notify(self, case: dict) -> None:
        if not self.members:
            self.refresh_membership()
        for node in self.nodes_of_site(case["target_site"]):
            body = {"token": self.node_token, "op": "notify", "case": case}
            try:
                self._call(node, MsgType.SECOND_OPINION_REQUEST, body)
            except MgvoError as exc:
                log.warning("could not notify %s of case %s: %s", node, case["case_id"], exc)

    def _so_handle(self, body: dict) -> dict:
        op = body.get("op")
        if op == "notify":
            self.require(self.identify(body["token"]), "vo_admin")
            case = body["case"]
            self.store.put({"type": "case_notice", "case_id": case["case_id"], "lfn": case["lfn"],
                            "owner_node": case["owner_node"], "requester": case["requester"],
                            "target_site": case["target_site"], "state": case["state"]})
            return {"ack": True}
        if op == "request":
            return {"case": self.request_second_opinion(body["lfn"], body["target_site"], body["token"])}
        if op == "list":
            return {"cases": self.list_cases(body["token"])}
        if op == "create":
            return self._so_local(body)
        if op in ("get", "report", "annotate"):
            return self._so_call(owner_of(body["case_id"]), body)
        raise NotFound(f"unknown second-opinion operation {op!r}")

    # ------------------------------------------------------------ server side

    def handle(self, msg: Message, src: Optional[str]) -> list[Message]:
        body = msg.body
        t = msg.msg_type
        if t == MsgType.SUBQUERY_REQUEST:
            return self._subquery(body)
        if t == MsgType.QUERY_REQUEST:
            rs = self.run_query(body["query"], body["token"])
            return [Message(MsgType.QUERY_RESULT, {"result": rs.to_dict()})]
        if t == MsgType.JOB_SUBMIT:
            return self._job_submit(body)
        if t == MsgType.JOB_STATUS:
            self.identify(body["token"])
            job = self.jobs.get(body["job_id"])
            if job is None:
                raise NotFound(f"job {body['job_id']}")
            return [Message(MsgType.JOB_STATUS, {"job_id": job.job_id, "status": job.status})]
        if t == MsgType.FETCH_IMAGE:
            return self._serve_fetch(body)
        if t == MsgType.INGEST:
            return self._ingest_request(body)
        if t == MsgType.SECOND_OPINION_REQUEST:
            return [Message(MsgType.SECOND_OPINION_REQUEST, self._so_handle(body))]
        if t == MsgType.ANNOTATION_PUSH:
            return [Message(MsgType.ANNOTATION_PUSH, self._so_handle({**body, "op": "annotate"}))]
        raise NotFound(f"{self.node_id} does not serve {t.name}")

    def _subquery(self, body: dict) -> list[Message]:
        identity = self.identify(body["token"])
        ast = QueryAst.from_dict(body["query"])
        self.require(identity, "count_query" if ast.count_only else "query")
        check_filterable(ast, identity.roles)
        if body.get("mode") == "select":
            self.require(identity, "apply_algorithm", ast.apply[0] if ast.apply else None)
            sel = []
            for row in select(ast, self.store):
                guid = row["image.guid"]
                sel.append([guid, [list(r) for r in self.store.catalogue.whereis(guid)]])
            return [Message(MsgType.SUBQUERY_RESULT, {"selection": sorted(sel)})]
        return [Message(MsgType.SUBQUERY_RESULT, {"rows": execute_local(ast, self.store, identity.roles)})]

    def _job_submit(self, body: dict) -> list[Message]:
        identity = self.identify(body["token"])
        job = analysis.Job.from_dict(body["job"])
        self.require(identity, "apply_algorithm", job.algorithm_id)
        if job.node_id != self.node_id:
            raise Denied(f"job {job.job_id} is assigned to {job.node_id}")
        job.submitted_by = identity.subject
        self.jobs[job.job_id] = job
        analysis.run_job(job, self.store)
        return [Message(MsgType.JOB_RESULT, {"job": job.to_dict()})]

    def _serve_fetch(self, body: dict) -> list[Message]:
        identity = self.identify(body["token"])
        self.require(identity, "replicate" if body.get("replicate") else "fetch_image")
        lfn = body["lfn"]
        if body.get("resolve"):
            return [Message(MsgType.FETCH_IMAGE, {"entry": self.store.catalogue.lookup(lfn).to_dict()})]
        try:
            entry = self.store.catalogue.lookup(lfn)
        except NotFound:
            entry = None
        if entry is not None and self.store.has_blob(entry.guid):
            return self._chunks(lfn, entry.guid, entry.checksum, self.store.get_blob(entry.guid))
        if body.get("relay"):
            blob = self.fetch_image(lfn, body["token"])
            entry = self.resolve(lfn, body["token"])
            return self._chunks(lfn, entry["guid"], entry["checksum"], blob)
        raise NotFound(lfn)

    def _ingest_request(self, body: dict) -> list[Message]:
        identity = self.identify(body["token"])
        if body.get("op") == "replicate":
            self.require(identity, "replicate")
            entry = body["entry"]
            replies = self._call(body["source"], MsgType.FETCH_IMAGE,
                                 {"token": body["token"], "lfn": entry["lfn"], "replicate": True})
            blob = self._reassemble(replies, entry["checksum"])
            with self.store.lock:
                self.store.put_blob(blob)
                for rec in body["records"]:
                    self.store.put(from_record(rec))
                path = self.store.relative_blob_path(entry["guid"])
                for node, p in entry["replicas"]:
                    self.store.catalogue.register(entry["lfn"], entry["guid"], entry["size"],
                                                  entry["checksum"], (node, p))
                self.store.catalogue.add_replica(entry["guid"], self.node_id, path)
            return _ack(MsgType.INGEST, path=path)
        self.require(identity, "ingest")
        lfn, guid = self.ingest(base64.b64decode(body["mgif"]))
        return _ack(MsgType.INGEST, lfn=lfn, guid=guid)
