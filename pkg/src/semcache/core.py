"""Vector math, deterministic synthetic embeddings, and shared domain types.

Vectors are stored as float32 arrays and normalized at ingestion so that
cosine similarity on the hot path reduces to a dot product. Accumulation
happens in float64.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_DIM = 768

Vector = np.ndarray


def as_vector(values: Sequence[float] | np.ndarray, dim: int | None = None) -> Vector:
    """Coerce ``values`` to a finite 1-d float32 vector, checking ``dim`` if given."""
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"expected dimension {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite entries")
    return v


def normalize(v: Sequence[float] | np.ndarray) -> Vector:
    """Return ``v`` scaled to unit L2 norm. Raises on the zero vector."""
    v = as_vector(v)
    norm = float(np.linalg.norm(v.astype(np.float64)))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return (v / norm).astype(np.float32)


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Cosine similarity of two non-zero vectors of equal dimension, in [-1, 1]."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    na = float(np.linalg.norm(a64))
    nb = float(np.linalg.norm(b64))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(np.clip(np.dot(a64, b64) / (na * nb), -1.0, 1.0))


def dot_many(matrix: np.ndarray, query: Vector) -> np.ndarray:
    """Dot products of each row of ``matrix`` against ``query`` (float32 rows)."""
    return matrix @ query


def synthetic_embed(text: str, dim: int = DEFAULT_DIM, seed: int = 0) -> Vector:
    """Deterministic stand-in for an embedding model.

    Hashes ``(seed, text)`` into an RNG seed, draws a Gaussian vector and
    normalizes it. Distinct texts land near-orthogonal in high dimension.
    """
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    digest = hashlib.sha256(f"{seed}:{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return normalize(rng.standard_normal(dim))


@dataclass
class QueryRecord:
    """One logged query. ``cluster_label`` is ground truth on synthetic corpora."""

    id: str
    user_id: str
    timestamp: float
    text: str
    embedding: Vector | None = None
    response: str | None = None
    cluster_label: int | None = None


def planted_topic(cluster: int, dim: int, seed: int) -> Vector:
    """Unit topic vector of planted cluster ``cluster`` for a given corpus seed."""
    return synthetic_embed(f"planted-topic-{cluster}", dim, seed)


def planted_response(cluster: int) -> str:
    return f"response:topic-{cluster:05d}"


def noise_sigma(intra_sim: float, dim: int) -> float:
    """Per-coordinate noise scale giving expected within-cluster cosine ``intra_sim``.

    For members m_i = unit(t + sigma * g_i), E[cos(m_1, m_2)] ~ 1 / (1 + sigma^2 D).
    """
    if not 0.0 < intra_sim < 1.0:
        raise ValueError(f"intra_sim must be in (0, 1), got {intra_sim}")
    return math.sqrt((1.0 / intra_sim - 1.0) / dim)


def zipf_counts(n_clusters: int, total: int, s: float) -> list[int]:
    """Split ``total`` into per-cluster counts proportional to (i+1)^-s.

    Largest-remainder rounding; deterministic, sums exactly to ``total``.
    """
    if n_clusters < 1 or total < 0:
        raise ValueError("need n_clusters >= 1 and total >= 0")
    weights = np.array([(i + 1.0) ** (-s) for i in range(n_clusters)], dtype=np.float64)
    shares = weights / weights.sum() * total
    counts = np.floor(shares).astype(int)
    remainder = total - int(counts.sum())
    if remainder > 0:
        fractional = shares - counts
        order = sorted(range(n_clusters), key=lambda i: (-fractional[i], i))
        for i in order[:remainder]:
            counts[i] += 1
    return counts.tolist()


def generate_planted_corpus(
    n_clusters: int,
    per_cluster: int,
    intra_sim: float,
    dim: int = DEFAULT_DIM,
    seed: int = 0,
    zipf_s: float = 0.0,
    user_pool: int = 1000,
) -> list[QueryRecord]:
    """Synthetic query log with known cluster structure.

    ``n_clusters * per_cluster`` records total, distributed across clusters by a
    Zipf(``zipf_s``) law (``zipf_s=0`` means uniform, exactly ``per_cluster``
    each). Each record carries its ground-truth ``cluster_label`` and a
    deterministic response keyed by cluster.
    """
    total = n_clusters * per_cluster
    if total < 1:
        raise ValueError("corpus must contain at least one record")
    sigma = noise_sigma(intra_sim, dim)
    rng = np.random.default_rng(seed)
    topics = [planted_topic(c, dim, seed) for c in range(n_clusters)]
    counts = zipf_counts(n_clusters, total, zipf_s)
    labels = np.repeat(np.arange(n_clusters), counts)
    labels = labels[rng.permutation(total)]
    records: list[QueryRecord] = []
    for i, label in enumerate(labels):
        label = int(label)
        vec = normalize(topics[label] + sigma * rng.standard_normal(dim).astype(np.float32))
        records.append(
            QueryRecord(
                id=f"q-{i:06d}",
                user_id=f"user-{int(rng.integers(0, user_pool)):05d}",
                timestamp=float(i),
                text=f"query {i} about topic {label}",
                embedding=vec,
                response=planted_response(label),
                cluster_label=label,
            )
        )
    return records


_REQUIRED_LOG_FIELDS = ("id", "user", "ts", "text")


def load_query_log(path: str) -> list[QueryRecord]:
    """Load a JSON Lines query log.

    Each line holds an object with ``id``, ``user``, ``ts``, ``text`` plus
    optional ``embedding`` and ``response``. Unknown fields are ignored.
    Malformed lines raise ValueError naming the line number.
    """
    records: list[QueryRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"malformed JSON on line {lineno}: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ValueError(f"malformed record on line {lineno}: expected an object")
            missing = [k for k in _REQUIRED_LOG_FIELDS if k not in obj]
            if missing:
                raise ValueError(f"malformed record on line {lineno}: missing {missing}")
            embedding = obj.get("embedding")
            records.append(
                QueryRecord(
                    id=str(obj["id"]),
                    user_id=str(obj["user"]),
                    timestamp=float(obj["ts"]),
                    text=str(obj["text"]),
                    embedding=as_vector(embedding) if embedding is not None else None,
                    response=obj.get("response"),
                    cluster_label=obj.get("cluster_label"),
                )
            )
    return records


def dump_query_log(records: list[QueryRecord], path: str) -> None:
    """Write records as JSON Lines (inverse of :func:`load_query_log`)."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj: dict = {"id": r.id, "user": r.user_id, "ts": r.timestamp, "text": r.text}
            if r.embedding is not None:
                obj["embedding"] = [float(x) for x in r.embedding]
            if r.response is not None:
                obj["response"] = r.response
            if r.cluster_label is not None:
                obj["cluster_label"] = r.cluster_label
            fh.write(json.dumps(obj) + "\n")
