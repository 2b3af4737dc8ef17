"""Command-line entry points: ``mgvo``, ``mgvo-node`` and ``mgvo-central``.

Every network command sends one request frame to a Grid-box (``--node``)
and prints what comes back. ``--format json`` prints canonical JSON (sorted
keys, compact); the default prints aligned tables.

Exit status: 0 success, 1 operational error (message on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Optional, Protocol, TextIO

from .collab import parse_region
from .config import load_central_config, load_config, read_config
from .errors import ChecksumMismatch, MgvoError
from .model import canonical_json
from .security import issue_token
from .sockets import SocketTransport
from .store import LocalStore
from .wire import Message, MsgType

log = logging.getLogger(__name__)

CLIENT_TIMEOUT = 120.0


class Client(Protocol):
    def request(self, dst: str, msg_type: MsgType, body: dict) -> list[Message]: ...


class SocketClient:
    def __init__(self, timeout: float = CLIENT_TIMEOUT):
        self.transport = SocketTransport()
        self.timeout = timeout

    def request(self, dst: str, msg_type: MsgType, body: dict) -> list[Message]:
        return self.transport.call("client", dst, msg_type, body, self.timeout)


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ output

def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, dict)):
        return canonical_json(v)
    return str(v)


def format_table(rows: list[dict], columns: Optional[list[str]] = None) -> str:
    if not rows:
        return "(no rows)"
    columns = columns or sorted({k for r in rows for k in r})
    cells = [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines)


def _human(kind: str, obj) -> str:
    if kind == "result":
        status = ", ".join(f"{n}={s}" for n, s in sorted(obj["per_node_status"].items()))
        tail = f"{obj['row_count']} row(s); partial={str(obj['partial']).lower()}; {status}"
        return format_table(obj["rows"]) + "\n" + tail
    if kind == "rows":
        return format_table(obj)
    if kind == "case":
        anns = obj.get("annotations", [])
        head = format_table([{k: v for k, v in obj.items() if k != "annotations"}])
        return head + ("\n\nannotations:\n" + format_table(anns) if anns else "\n(no visible annotations)")
    if kind == "report":
        case = _human("case", {**obj["case"], "annotations": obj["annotations"]})
        return f"{case}\nagreement: {str(obj['agreement']).lower()}"
    if kind == "text":
        return str(obj)
    return format_table([obj])


# ------------------------------------------------------------------ context

class Ctx:
    def __init__(self, args, client: Client, out: TextIO):
        self.args = args
        self.client = client
        self.out = out

    def emit(self, kind: str, obj) -> None:
        if getattr(self.args, "format", "table") == "json":
            self.out.write(canonical_json(obj) + "\n")
        else:
            self.out.write(_human(kind, obj) + "\n")

    @property
    def token(self) -> str:
        tok = self.args.token or os.environ.get("MGVO_TOKEN")
        if not tok:
            raise UsageError("a credential is required (--token or MGVO_TOKEN)")
        if tok.startswith("@"):
            tok = Path(tok[1:]).read_text(encoding="utf-8").strip()
        return tok

    @property
    def node(self) -> str:
        node = self.args.node or os.environ.get("MGVO_NODE")
        if not node:
            raise UsageError("a Grid-box address is required (--node or MGVO_NODE)")
        return node

    def call(self, msg_type: MsgType, body: dict, dst: Optional[str] = None) -> list[Message]:
        return self.client.request(dst or self.node, msg_type, {"token": self.token, **body})


# ------------------------------------------------------------------ commands

def cmd_ingest(ctx: Ctx) -> None:
    out = []
    for path in ctx.args.files:
        data = Path(path).read_bytes()
        reply = ctx.call(MsgType.INGEST, {"mgif": base64.b64encode(data).decode("ascii")})[-1].body
        out.append({"file": Path(path).name, "lfn": reply["lfn"], "guid": reply["guid"]})
    ctx.emit("rows", out)


def cmd_query(ctx: Ctx) -> None:
    reply = ctx.call(MsgType.QUERY_REQUEST, {"query": ctx.args.ql})
    ctx.emit("result", reply[-1].body["result"])


def build_apply_query(where: str, algorithm: str, params: list[str]) -> str:
    where = where.strip()
    if not where.upper().startswith("SELECT"):
        where = f"SELECT images WHERE {where}"
    for p in params:
        if "=" not in p:
            raise UsageError(f"--param expects k=v, got {p!r}")
    return f"{where} APPLY {algorithm}({', '.join(params)})"


def cmd_job_submit(ctx: Ctx) -> None:
    ql = build_apply_query(ctx.args.where, ctx.args.algorithm, ctx.args.param or [])
    reply = ctx.call(MsgType.QUERY_REQUEST, {"query": ql})
    ctx.emit("result", reply[-1].body["result"])


def _local_store(args) -> LocalStore:
    if args.config:
        cfg = load_config(args.config)
        return LocalStore(cfg.data_dir, cfg.node_id, read_only=True)
    if not args.data_dir:
        raise UsageError("catalogue commands need --config or --data-dir")
    # the node daemon may be writing; never repair or append from here
    return LocalStore(args.data_dir, args.node_id or Path(args.data_dir).name, read_only=True)


def cmd_catalogue(ctx: Ctx) -> None:
    with _local_store(ctx.args) as store:
        cat = store.catalogue
        op = ctx.args.cat_op
        if op == "ls":
            ctx.emit("rows", [e.to_dict() for e in cat.ls(ctx.args.prefix)])
        elif op == "whereis":
            ctx.emit("rows", [{"node_id": n, "path": p} for n, p in cat.whereis(ctx.args.guid)])
        else:
            ok = cat.verify(ctx.args.guid)
            ctx.emit("record", {"guid": ctx.args.guid, "status": "ok" if ok else "corrupt"})
            if not ok:
                raise ChecksumMismatch(f"{ctx.args.guid}: local replica is corrupt")


def cmd_fetch(ctx: Ctx) -> None:
    replies = ctx.call(MsgType.FETCH_IMAGE, {"lfn": ctx.args.lfn, "relay": True})
    chunks = sorted((m.body for m in replies if m.msg_type == MsgType.IMAGE_CHUNK), key=lambda b: b["seq"])
    data = b"".join(base64.b64decode(c["data"]) for c in chunks)
    checksum = chunks[0]["checksum"] if chunks else ""
    if hashlib.sha256(data).hexdigest() != checksum:
        raise ChecksumMismatch(f"{ctx.args.lfn}: received bytes do not match the catalogue checksum")
    Path(ctx.args.out).write_bytes(data)
    ctx.emit("record", {"lfn": ctx.args.lfn, "guid": chunks[0]["guid"], "bytes": len(data),
                        "chunks": len(chunks), "checksum": checksum})


def cmd_so(ctx: Ctx) -> None:
    a = ctx.args
    if a.so_op == "request":
        body = ctx.call(MsgType.SECOND_OPINION_REQUEST, {"op": "request", "lfn": a.image, "target_site": a.site})
        ctx.emit("case", body[-1].body["case"])
    elif a.so_op == "list":
        body = ctx.call(MsgType.SECOND_OPINION_REQUEST, {"op": "list"})
        ctx.emit("rows", body[-1].body["cases"])
    elif a.so_op == "annotate":
        region = [list(v) for v in parse_region(a.region)]
        body = ctx.call(MsgType.ANNOTATION_PUSH, {"case_id": a.case, "label": a.label,
                                                  "region": region, "note": a.note or ""})
        ctx.emit("case", body[-1].body["case"])
    elif a.so_op == "get":
        body = ctx.call(MsgType.SECOND_OPINION_REQUEST, {"op": "get", "case_id": a.case})
        ctx.emit("case", body[-1].body["case"])
    else:
        body = ctx.call(MsgType.SECOND_OPINION_REQUEST, {"op": "report", "case_id": a.case})
        ctx.emit("report", body[-1].body["report"])


def _vo_secret(args) -> str:
    if args.config:
        values = read_config(args.config)
        if values.get("vo_secret"):
            return values["vo_secret"]
    secret = args.secret or os.environ.get("MGVO_VO_SECRET")
    if not secret:
        raise UsageError("signing needs the VO secret (--config, --secret or MGVO_VO_SECRET)")
    return secret


def parse_expiry(text: str, now: Optional[float] = None) -> int:
    now = time.time() if now is None else now
    try:
        if text.startswith("+"):
            return int(now) + int(text[1:])
        return int(text)
    except ValueError:
        raise UsageError(f"--expires expects epoch seconds or +SECONDS, got {text!r}") from None


def cmd_admin(ctx: Ctx) -> None:
    a = ctx.args
    if a.admin_op == "members":
        central = a.central or os.environ.get("MGVO_CENTRAL")
        if not central:
            raise UsageError("admin members needs --central or MGVO_CENTRAL")
        reply = ctx.call(MsgType.REGISTER, {"op": "members"}, dst=central)
        ctx.emit("rows", reply[-1].body["membership"])
        return
    secret = _vo_secret(a)
    if a.admin_op == "add-node":
        subject, roles = f"node:{a.node_id}", ["admin"]
    else:
        subject, roles = a.subject, [r.strip() for r in a.roles.split(",") if r.strip()]
    try:
        cred = issue_token(subject, roles, parse_expiry(a.expires), secret)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ctx.emit("record", {"subject": cred.subject, "roles": sorted(str(r) for r in cred.roles),
                        "expiry": cred.expiry, "token": cred.wire()})


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("table", "json"), default="table")
    common.add_argument("--token", help="credential wire form, or @FILE (default $MGVO_TOKEN)")
    common.add_argument("--node", help="Grid-box host:port (default $MGVO_NODE)")

    p = argparse.ArgumentParser(prog="mgvo", description="Client for a federated mammography VO")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="ingest MGIF files at a node")
    s.add_argument("files", nargs="+")
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("query", parents=[common], help="run a federated query")
    s.add_argument("ql")
    s.set_defaults(fn=cmd_query)

    job = sub.add_parser("job", help="analysis jobs").add_subparsers(dest="job_op", required=True)
    s = job.add_parser("submit", parents=[common], help="run an algorithm where the data lives")
    s.add_argument("--algorithm", required=True)
    s.add_argument("--param", action="append", metavar="K=V")
    s.add_argument("--where", required=True, help="conjunction, or a full SELECT images query")
    s.set_defaults(fn=cmd_job_submit)

    cat_common = argparse.ArgumentParser(add_help=False, parents=[common])
    cat_common.add_argument("--config", help="node config file (locates the data directory)")
    cat_common.add_argument("--data-dir")
    cat_common.add_argument("--node-id")
    cat = sub.add_parser("catalogue", help="inspect a node's file catalogue").add_subparsers(dest="cat_op", required=True)
    s = cat.add_parser("ls", parents=[cat_common])
    s.add_argument("prefix")
    s.set_defaults(fn=cmd_catalogue)
    for name in ("whereis", "verify"):
        s = cat.add_parser(name, parents=[cat_common])
        s.add_argument("guid")
        s.set_defaults(fn=cmd_catalogue)

    s = sub.add_parser("fetch", parents=[common], help="fetch an image blob by LFN")
    s.add_argument("lfn")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_fetch)

    so = sub.add_parser("so", help="second-opinion workflow").add_subparsers(dest="so_op", required=True)
    s = so.add_parser("request", parents=[common])
    s.add_argument("--image", required=True)
    s.add_argument("--site", required=True)
    s.set_defaults(fn=cmd_so)
    s = so.add_parser("list", parents=[common])
    s.set_defaults(fn=cmd_so)
    s = so.add_parser("annotate", parents=[common])
    s.add_argument("--case", required=True)
    s.add_argument("--label", required=True)
    s.add_argument("--region", required=True, help='"x,y;x,y;x,y"')
    s.add_argument("--note")
    s.set_defaults(fn=cmd_so)
    for name in ("get", "report"):
        s = so.add_parser(name, parents=[common])
        s.add_argument("--case", required=True)
        s.set_defaults(fn=cmd_so)

    adm_common = argparse.ArgumentParser(add_help=False, parents=[common])
    adm_common.add_argument("--config", help="central config file holding vo_secret")
    adm_common.add_argument("--secret", help="VO signing secret (default $MGVO_VO_SECRET)")
    adm_common.add_argument("--expires", default="+31536000", help="epoch seconds or +SECONDS")
    adm = sub.add_parser("admin", help="VO administration").add_subparsers(dest="admin_op", required=True)
    s = adm.add_parser("add-node", parents=[adm_common], help="issue a node credential")
    s.add_argument("--node-id", required=True)
    s.set_defaults(fn=cmd_admin)
    s = adm.add_parser("issue-token", parents=[adm_common], help="issue a user credential")
    s.add_argument("--subject", required=True, help="user@site")
    s.add_argument("--roles", required=True, help="comma-separated roles")
    s.set_defaults(fn=cmd_admin)
    s = adm.add_parser("members", parents=[common], help="list VO membership")
    s.add_argument("--central")
    s.set_defaults(fn=cmd_admin)
    return p


def dispatch(argv: list[str], client: Optional[Client] = None, stdout: Optional[TextIO] = None,
             stderr: Optional[TextIO] = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO)
    ctx = Ctx(args, client or SocketClient(), stdout)
    try:
        args.fn(ctx)
    except UsageError as exc:
        stderr.write(f"mgvo: {exc}\n")
        return 2
    except MgvoError as exc:
        stderr.write(f"{exc.code}: {exc}\n")
        return 1
    except OSError as exc:
        stderr.write(f"error: {exc}\n")
        return 1
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


# ------------------------------------------------------------------ daemons

def _serve_parser(prog: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=prog)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("serve")
    s.add_argument("--config", required=True)
    s.add_argument("-v", "--verbose", action="store_true")
    return p


def _daemon_main(prog: str, run: Callable[[str], int], argv) -> int:
    try:
        args = _serve_parser(prog).parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return run(args.config)
    except MgvoError as exc:
        sys.stderr.write(f"{exc.code}: {exc}\n")
        return 1


def node_main(argv: Optional[list[str]] = None) -> int:
    from .daemons import serve_node
    return _daemon_main("mgvo-node", lambda path: serve_node(load_config(path)),
                        sys.argv[1:] if argv is None else argv)


def central_main(argv: Optional[list[str]] = None) -> int:
    from .daemons import serve_central
    return _daemon_main("mgvo-central", lambda path: serve_central(load_central_config(path)),
                        sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
