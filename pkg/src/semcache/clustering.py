"""Offline clustering path: group query embeddings, emit one centroid per group.

Community detection is the threshold-seeded greedy variant used in the
sentence-embedding ecosystem: every vector's candidate community is the set of
vectors within the clustering threshold of it, candidates are accepted from
largest to smallest, and leftovers become singletons.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .core import QueryRecord, Vector, as_vector, normalize

logger = logging.getLogger(__name__)

INFINITE_ACCESS = float("inf")

SNAPSHOT_MAGIC = b"SCRP"
SNAPSHOT_VERSION = 1


@dataclass
class Centroid:
    """A cached unit: representative vector, stored output, and locality weight.

    ``cluster_size`` is the semantic-locality weight (float, because of decay).
    ``access_count`` counts references while cached; it holds INFINITE_ACCESS
    only between a merge and the post-filter reset.
    """

    id: str
    vector: Vector
    output: str
    cluster_size: float
    access_count: float = 0.0
    created_at: float = 0.0

    def copy(self) -> "Centroid":
        return replace(self)


@dataclass
class CentroidRepository:
    """Immutable clustering result; the candidate pool for cache promotion."""

    centroids: list[Centroid]
    theta_c: float
    source_query_count: int
    built_at: float
    dim: int


def _stack_unit_rows(vectors: list[Vector | list[float]]) -> np.ndarray:
    rows = [normalize(v) for v in vectors]
    return np.stack(rows).astype(np.float32)


def community_detect(
    vectors: list[Vector],
    theta_c: float,
    min_community_size: int = 2,
    block_size: int = 1024,
) -> list[list[int]]:
    """Partition vector indexes into cosine-similarity communities.

    Returns accepted communities (largest candidate first, seed as the first
    element) followed by singletons for every unassigned vector. Every member
    of an accepted community has cosine >= ``theta_c`` to the community seed.
    """
    if not 0.0 < theta_c < 1.0:
        raise ValueError(f"theta_c must be in (0, 1), got {theta_c}")
    if min_community_size < 1:
        raise ValueError(f"min_community_size must be >= 1, got {min_community_size}")
    n = len(vectors)
    if n == 0:
        return []
    mat = _stack_unit_rows(vectors)
    candidates: list[np.ndarray] = []
    for start in range(0, n, block_size):
        sims = mat[start : start + block_size] @ mat.T
        for row in sims:
            candidates.append(np.flatnonzero(row >= theta_c))
    order = sorted(range(n), key=lambda i: (-len(candidates[i]), i))
    assigned = np.zeros(n, dtype=bool)
    communities: list[list[int]] = []
    for seed in order:
        if assigned[seed]:
            continue
        members = [int(j) for j in candidates[seed] if not assigned[j]]
        if len(members) < min_community_size:
            continue
        assigned[members] = True
        rest = sorted(m for m in members if m != seed)
        communities.append([seed] + rest)
    for i in range(n):
        if not assigned[i]:
            communities.append([i])
    return communities


def compute_centroid(
    cluster: list[QueryRecord],
    centroid_id: str | None = None,
    created_at: float = 0.0,
) -> Centroid:
    """Build the centroid of a non-empty cluster of embedded records.

    The vector is the re-normalized arithmetic mean of member embeddings; the
    output is the response of the member closest to that mean (ties broken by
    the lowest record id). A degenerate zero mean falls back to the first
    member's embedding with a warning.
    """
    if not cluster:
        raise ValueError("cannot compute the centroid of an empty cluster")
    for r in cluster:
        if r.embedding is None:
            raise ValueError(f"record {r.id} has no embedding")
        if r.response is None:
            raise ValueError(f"record {r.id} has no response")
    mean = np.mean([r.embedding.astype(np.float64) for r in cluster], axis=0)
    if float(np.linalg.norm(mean)) == 0.0:
        logger.warning(
            "cluster mean is the zero vector; falling back to member %s", cluster[0].id
        )
        vector = as_vector(cluster[0].embedding).copy()
    else:
        vector = normalize(mean)
    sims = np.stack([r.embedding for r in cluster]).astype(np.float32) @ vector
    best = min(range(len(cluster)), key=lambda i: (-sims[i], cluster[i].id))
    return Centroid(
        id=centroid_id if centroid_id is not None else f"c-{min(r.id for r in cluster)}",
        vector=vector,
        output=cluster[best].response,
        cluster_size=float(len(cluster)),
        access_count=0.0,
        created_at=created_at,
    )


def build_repository(
    log: list[QueryRecord],
    theta_c: float = 0.86,
    min_community_size: int = 2,
) -> CentroidRepository:
    """Cluster an embedded query log into a centroid repository.

    One centroid per accepted community plus one per singleton, so the sum of
    cluster sizes equals the log length.
    """
    for r in log:
        if r.embedding is None:
            raise ValueError(f"record {r.id} has no embedding")
        if r.response is None:
            raise ValueError(f"record {r.id} has no response")
    dim = log[0].embedding.shape[0] if log else 0
    built_at = max((r.timestamp for r in log), default=0.0)
    communities = community_detect([r.embedding for r in log], theta_c, min_community_size)
    centroids = [
        compute_centroid([log[i] for i in members], f"c-{k:06d}", created_at=built_at)
        for k, members in enumerate(communities)
    ]
    return CentroidRepository(
        centroids=centroids,
        theta_c=theta_c,
        source_query_count=len(log),
        built_at=built_at,
        dim=dim,
    )


def should_recluster(
    new_query_count: int,
    initial_query_count: int,
    trigger_fraction: float = 0.10,
) -> bool:
    """True once newly accumulated queries reach ``trigger_fraction`` of the initial set."""
    if initial_query_count <= 0:
        raise ValueError("initial_query_count must be positive")
    return new_query_count >= trigger_fraction * initial_query_count


# ---------------------------------------------------------------------------
# Repository snapshots
#
# Binary layout, little-endian:
#   header: magic "SCRP", version u32, dim u32, theta_c f64, count u32,
#           source_query_count u64, built_at f64
#   per centroid: id_len u16 + utf8, vector dim x f32, cluster_size f64,
#                 output_len u32 + utf8
# The JSON dump mirrors the same fields for human inspection.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIdIQd")


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_repository(repo: CentroidRepository, path: str) -> None:
    parts = [
        _HEADER.pack(
            SNAPSHOT_MAGIC,
            SNAPSHOT_VERSION,
            repo.dim,
            repo.theta_c,
            len(repo.centroids),
            repo.source_query_count,
            repo.built_at,
        )
    ]
    for c in repo.centroids:
        cid = c.id.encode("utf-8")
        out = c.output.encode("utf-8")
        parts.append(struct.pack("<H", len(cid)))
        parts.append(cid)
        parts.append(np.asarray(c.vector, dtype="<f4").tobytes())
        parts.append(struct.pack("<d", c.cluster_size))
        parts.append(struct.pack("<I", len(out)))
        parts.append(out)
    _atomic_write(path, b"".join(parts))


def load_repository(path: str) -> CentroidRepository:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated repository snapshot")
    magic, version, dim, theta_c, count, source_count, built_at = _HEADER.unpack_from(data, 0)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a repository snapshot (bad magic)")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    offset = _HEADER.size
    centroids: list[Centroid] = []
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        cid = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        vector = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += 4 * dim
        (cluster_size,) = struct.unpack_from("<d", data, offset)
        offset += 8
        (out_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        output = data[offset : offset + out_len].decode("utf-8")
        offset += out_len
        centroids.append(
            Centroid(cid, vector, output, cluster_size, access_count=0.0, created_at=built_at)
        )
    return CentroidRepository(centroids, theta_c, source_count, built_at, dim)


def dump_repository_json(repo: CentroidRepository, path: str) -> None:
    obj = {
        "version": SNAPSHOT_VERSION,
        "dim": repo.dim,
        "theta_c": repo.theta_c,
        "count": len(repo.centroids),
        "source_query_count": repo.source_query_count,
        "built_at": repo.built_at,
        "centroids": [
            {
                "id": c.id,
                "vector": [float(x) for x in c.vector],
                "cluster_size": c.cluster_size,
                "output": c.output,
            }
            for c in repo.centroids
        ],
    }
    _atomic_write(path, (json.dumps(obj, indent=None, sort_keys=True) + "\n").encode("utf-8"))
