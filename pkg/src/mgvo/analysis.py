"""Image-analysis services and data-local job scheduling.

Both algorithms are fixed, versioned stand-ins. All threshold comparisons
are done in exact integer arithmetic so boundary pixels never depend on
floating-point rounding.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import (
    ImageTooSmall,
    InvalidTransition,
    MgvoError,
    NoLocalReplica,
    NotFound,
    UnknownAlgorithm,
    UnknownParam,
    UnplacedImage,
)
from .security import Role


@dataclass(frozen=True)
class AlgorithmDescriptor:
    algorithm_id: str
    version: str
    params: dict  # name -> (type, default)
    roles: frozenset


ALGORITHMS = {
    "density": AlgorithmDescriptor(
        "density", "density/1.0", {},
        frozenset({Role.CLINICIAN, Role.RESEARCHER, Role.EPIDEMIOLOGIST})),
    "cade": AlgorithmDescriptor("cade", "cade/1.0", {}, frozenset({Role.CLINICIAN})),
}


def descriptor(algorithm_id: str) -> AlgorithmDescriptor:
    try:
        return ALGORITHMS[algorithm_id]
    except KeyError:
        raise UnknownAlgorithm(algorithm_id) from None


def check_params(algorithm_id: str, params: dict) -> dict:
    desc = descriptor(algorithm_id)
    out = {}
    for name, text in params.items():
        if name not in desc.params:
            raise UnknownParam(f"{algorithm_id} has no parameter {name!r}")
        kind, _ = desc.params[name]
        out[name] = kind(text)
    for name, (_, default) in desc.params.items():
        out.setdefault(name, default)
    return out


def pixels_from_blob(blob: bytes, width: int, height: int, bits: int) -> np.ndarray:
    dtype = "<u1" if bits == 8 else "<u2"
    return np.frombuffer(blob, dtype=dtype).reshape(height, width)


# ---------------------------------------------------------------- density


@dataclass(frozen=True)
class DensityResult:
    guid: Optional[str]
    breast_area_px: int
    dense_area_px: int
    density: float
    empty_mask: bool

    def to_row(self) -> dict:
        return {
            "type": "derived",
            "algorithm": ALGORITHMS["density"].version,
            "guid": self.guid,
            "breast_area_px": self.breast_area_px,
            "dense_area_px": self.dense_area_px,
            "density": self.density,
            "empty_mask": self.empty_mask,
        }


def density(pixels, bits: int, guid: Optional[str] = None) -> DensityResult:
    """Fraction of breast pixels that are dense.

    breast: p > max/10, dense: p > 3*max/5, with max = 2**bits - 1.
    """
    p = np.asarray(pixels, dtype=np.int64)
    top = (1 << bits) - 1
    breast = 10 * p > top
    dense = breast & (5 * p > 3 * top)
    n_breast = int(breast.sum())
    n_dense = int(dense.sum())
    if n_breast == 0:
        return DensityResult(guid, 0, 0, 0.0, True)
    return DensityResult(guid, n_breast, n_dense, n_dense / n_breast, False)


# ------------------------------------------------------------------- CADe

CLUSTER_RADIUS = 8
MIN_CLUSTER = 3


@dataclass(frozen=True)
class CadeResult:
    guid: Optional[str]
    candidate_points: list  # (x, y, intensity)
    clusters: list  # (centroid_x, centroid_y, point_count)

    def to_row(self) -> dict:
        return {
            "type": "derived",
            "algorithm": ALGORITHMS["cade"].version,
            "guid": self.guid,
            "candidate_points": [list(p) for p in self.candidate_points],
            "clusters": [list(c) for c in self.clusters],
        }


def intensity_floor(pixels: np.ndarray) -> int:
    """Smallest integer v with v > mean + 3 * population std."""
    flat = pixels.astype(np.int64).ravel()
    n = int(flat.size)
    s = int(flat.sum())
    q = int((flat * flat).sum())
    # v > (s + 3 sqrt(n q - s^2)) / n  <=>  v*n - s >= isqrt(9 (n q - s^2)) + 1
    r = math.isqrt(9 * (n * q - s * s))
    return -(-(s + r + 1) // n)


def strict_local_maxima(pixels: np.ndarray) -> np.ndarray:
    """Mask of pixels strictly above every in-bounds 8-neighbour."""
    p = pixels.astype(np.int64)
    h, w = p.shape
    padded = np.full((h + 2, w + 2), -1, dtype=np.int64)
    padded[1:-1, 1:-1] = p
    mask = np.ones_like(p, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            mask &= p > padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return mask


def cluster_points(points: list[tuple[int, int]], radius: int = CLUSTER_RADIUS) -> list[list[int]]:
    """Single-linkage components under Chebyshev distance <= radius.

    Returns lists of indices into ``points``, each sorted, ordered by their
    first member.
    """
    parent = list(range(len(points)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    order = sorted(range(len(points)), key=lambda i: points[i][0])
    for a, i in enumerate(order):
        xi, yi = points[i]
        for j in order[a + 1:]:
            xj, yj = points[j]
            if xj - xi > radius:
                break
            if abs(yj - yi) <= radius:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(len(points)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def detect_microcalc(pixels, bits: int = 16, guid: Optional[str] = None) -> CadeResult:
    p = np.asarray(pixels)
    if p.ndim != 2 or p.shape[0] < 3 or p.shape[1] < 3:
        raise ImageTooSmall(f"need at least 3x3 pixels, got {p.shape}")
    mask = strict_local_maxima(p) & (p.astype(np.int64) >= intensity_floor(p))
    ys, xs = np.nonzero(mask)  # row-major order
    cands = [(int(x), int(y), int(p[y, x])) for y, x in zip(ys, xs)]
    clusters = []
    for members in cluster_points([(x, y) for x, y, _ in cands]):
        if len(members) >= MIN_CLUSTER:
            cx = sum(cands[i][0] for i in members) / len(members)
            cy = sum(cands[i][1] for i in members) / len(members)
            clusters.append((cx, cy, len(members)))
    return CadeResult(guid, cands, clusters)


def run_algorithm(algorithm_id: str, pixels, bits: int, guid: Optional[str] = None, params=None):
    if algorithm_id == "density":
        return density(pixels, bits, guid)
    if algorithm_id == "cade":
        return detect_microcalc(pixels, bits, guid)
    raise UnknownAlgorithm(algorithm_id)


# ------------------------------------------------------------------ jobs

_TRANSITIONS = {"queued": {"running"}, "running": {"done", "failed"}, "done": set(), "failed": set()}


@dataclass
class Job:
    job_id: str
    algorithm_id: str
    guids: list[str]
    node_id: str
    submitted_by: str = ""
    params: dict = field(default_factory=dict)
    status: str = "queued"
    results: list[dict] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)

    def advance(self, new: str) -> None:
        if new not in _TRANSITIONS[self.status]:
            raise InvalidTransition(f"{self.job_id}: {self.status} -> {new}")
        self.status = new

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Job":
        return cls(**d)


def schedule_jobs(selection: Iterable[tuple[str, Iterable]], algorithm_id: str,
                  live_nodes: Iterable[str], job_prefix: str = "job",
                  submitted_by: str = "", params: Optional[dict] = None) -> list[Job]:
    """Place each image on the lowest-id live node holding a replica."""
    descriptor(algorithm_id)
    live = set(live_nodes)
    per_node: dict[str, list[str]] = {}
    for guid, replicas in sorted(selection, key=lambda s: s[0]):
        holders = sorted({node for node, *_ in replicas} & live)
        if not holders:
            raise UnplacedImage(guid)
        per_node.setdefault(holders[0], []).append(guid)
    return [
        Job(f"{job_prefix}:{node}", algorithm_id, guids, node, submitted_by, dict(params or {}))
        for node, guids in sorted(per_node.items())
    ]


def run_job(job: Job, store) -> Job:
    """Run ``job`` against the local store; failures are per image."""
    job.advance("running")
    for guid in job.guids:
        try:
            image = store.images.get(guid)
            if image is None:
                raise NotFound(f"no image record for {guid}")
            if not store.catalogue.verify(guid):
                raise MgvoError("corrupt checksum")
            blob = store.get_blob(guid)
            pixels = pixels_from_blob(blob, image.width_px, image.height_px, image.bits_per_sample)
            result = run_algorithm(job.algorithm_id, pixels, image.bits_per_sample, guid, job.params)
        except (MgvoError, NoLocalReplica, ValueError) as exc:
            job.errors[guid] = f"{type(exc).__name__}: {exc}"
            continue
        if job.algorithm_id == "density" and image.density != result.density:
            store.put(dataclasses.replace(image, density=result.density))
        job.results.append(result.to_row())
    job.advance("failed" if job.errors else "done")
    return job


def collect(jobs: Iterable[Job]) -> tuple[list[dict], dict[str, str]]:
    """Merge job outputs: rows de-duplicated by guid and sorted, plus a
    per-node status map in ResultSet form."""
    rows: dict[str, dict] = {}
    status: dict[str, str] = {}
    for job in sorted(jobs, key=lambda j: j.node_id):
        for r in job.results:
            rows.setdefault(r["guid"], r)
        if job.status == "done":
            status.setdefault(job.node_id, "ok")
        else:
            detail = "; ".join(f"{g}: {e}" for g, e in sorted(job.errors.items())) or job.status
            status[job.node_id] = f"error:job failed: {detail}"
    return [rows[g] for g in sorted(rows)], status
