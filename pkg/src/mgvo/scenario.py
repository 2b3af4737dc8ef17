"""Shell-level end-to-end scenario, driven through the CLI.

ingest at every site -> simple queries -> APPLY density -> second-opinion
round trip -> combined report -> image fetch, plus the denials a policy
check expects. ``invoke(argv) -> (exit_code, stdout, stderr)`` runs one
``mgvo`` command, so the same script drives the simulated network and
real sockets.
"""

from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Callable

from .mgif import serialize_mgif
from .security import issue_token
from .synth import random_raw_case

SENTINEL = "ZQXSENTINEL"
FOREVER = 10 ** 10
CASES_PER_SITE = 3

Invoke = Callable[[list[str]], tuple[int, str, str]]


def write_case_files(root, sites, seed: int = 0, per_site: int = CASES_PER_SITE) -> dict[str, list[Path]]:
    rng = random.Random(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for site in sites:
        files[site] = []
        for i in range(per_site):
            raw = random_raw_case(rng, patient_id=f"{SENTINEL}-ID-{site}-{i // 2}",
                                  patient_name=f"{SENTINEL}-NAME-{site}-{i // 2}")
            path = root / f"{site}-{i}.mgif"
            path.write_bytes(serialize_mgif(raw))
            files[site].append(path)
    return files


def scenario_tokens(vo_secret, sites) -> dict[str, str]:
    def tok(subject, roles):
        return issue_token(subject, roles, FOREVER, vo_secret, now=0).wire()

    tokens = {f"clin@{s}": tok(f"clin@{s}", ["clinician"]) for s in sites}
    tokens["res"] = tok("res@" + sites[0], ["researcher"])
    tokens["off"] = tok("off@" + sites[0], ["official"])
    tokens["adm"] = tok("adm@central", ["admin"])
    return tokens


def run_scenario(invoke: Invoke, addresses: dict[str, str], vo_secret, workdir, seed: int = 0) -> list[dict]:
    """Run every step; returns ``[{step, code, stdout, stderr}]`` in order."""
    sites = sorted(addresses)
    a, b = sites[0], sites[-1]
    workdir = Path(workdir)
    files = write_case_files(workdir / "incoming", sites, seed)
    tokens = scenario_tokens(vo_secret, sites)
    log: list[dict] = []

    def step(name: str, argv: list[str], token: str, node: str, expect: int = 0) -> str:
        code, out, err = invoke(argv + ["--token", tokens[token], "--node", addresses[node], "--format", "json"])
        log.append({"step": name, "code": code, "stdout": out, "stderr": err.strip()})
        if code != expect:
            raise AssertionError(f"step {name}: exit {code}, expected {expect}: {err.strip()}")
        return out

    ingested = {}
    for s in sites:
        out = step(f"ingest@{s}", ["ingest", *map(str, files[s])], f"clin@{s}", s)
        ingested[s] = json.loads(out)

    step("query-cc", ["query", "SELECT images WHERE image.view = 'CC'"], f"clin@{a}", a)
    step("query-50plus-researcher",
         ["query", "SELECT images WHERE image.view = 'MLO' AND patient.age_at_exam >= 50"], "res", a)
    step("count-official", ["query", "SELECT images WHERE image.view = 'CC' COUNT"], "off", a)
    step("query-site-pruned", ["query", f"SELECT exams WHERE exam.site_id = '{b}'"], f"clin@{a}", a)
    step("density-job", ["job", "submit", "--algorithm", "density", "--where", "image.width_px >= 1"],
         f"clin@{a}", a)
    step("query-derived", ["query", "SELECT images WHERE image.density >= 0.0"], f"clin@{b}", b)
    step("admin-query-denied", ["query", "SELECT patients WHERE patient.age_at_exam >= 0"], "adm", a, expect=1)
    step("researcher-cade-denied", ["job", "submit", "--algorithm", "cade", "--where", "image.view = 'CC'"],
         "res", a, expect=1)

    lfn = ingested[a][0]["lfn"]
    case = json.loads(step("so-request", ["so", "request", "--image", lfn, "--site", b], f"clin@{a}", a))
    cid = case["case_id"]
    step("so-list@target", ["so", "list"], f"clin@{b}", b)
    step("so-get-before", ["so", "get", "--case", cid], f"clin@{b}", b)
    step("so-report-too-early", ["so", "report", "--case", cid], f"clin@{a}", a, expect=1)
    step("so-annotate-target", ["so", "annotate", "--case", cid, "--label", "malignant",
                                "--region", "1,1;6,1;6,6", "--note", "spiculated"], f"clin@{b}", b)
    step("so-get-requester-blind", ["so", "get", "--case", cid], f"clin@{a}", a)
    step("so-annotate-requester", ["so", "annotate", "--case", cid, "--label", "malignant",
                                   "--region", "2,2;7,2;7,7"], f"clin@{a}", a)
    step("so-duplicate-author", ["so", "annotate", "--case", cid, "--label", "benign",
                                 "--region", "2,2;7,2;7,7"], f"clin@{a}", a, expect=1)
    step("so-report", ["so", "report", "--case", cid], f"clin@{b}", b)

    step("fetch-remote", ["fetch", lfn, "--out", str(workdir / "fetched.img")], f"clin@{b}", b)
    step("researcher-fetch-denied", ["fetch", lfn, "--out", str(workdir / "denied.img")], "res", b, expect=1)
    return log


def _strip_times(obj):
    if isinstance(obj, dict):
        return {k: _strip_times(v) for k, v in obj.items() if not k.endswith("_at")}
    if isinstance(obj, list):
        return [_strip_times(v) for v in obj]
    return obj


def normalized(log: list[dict]) -> list[dict]:
    """Step outputs with timestamps removed, for cross-transport comparison."""
    out = []
    for entry in log:
        text = entry["stdout"].strip()
        body = _strip_times(json.loads(text)) if text else None
        out.append({"step": entry["step"], "code": entry["code"], "stdout": body})
    return out
