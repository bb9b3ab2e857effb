"""Workload generation: request arrival processes and query stream sources."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEFAULT_DIM,
    QueryRecord,
    Vector,
    normalize,
    planted_response,
    planted_topic,
    synthetic_embed,
)


@dataclass
class WorkloadSpec:
    """Arrival-process parameters. ``cv`` is the interarrival coefficient of
    variation; ``cv == 1`` reproduces a Poisson process."""

    rps: float
    cv: float = 1.0
    duration: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.rps <= 0:
            raise ValueError(f"rps must be > 0, got {self.rps}")
        if self.cv <= 0:
            raise ValueError(f"cv must be > 0, got {self.cv}")
        if self.duration <= 0:
            raise ValueError(f"duration must be > 0, got {self.duration}")


def generate_arrivals(spec: WorkloadSpec) -> np.ndarray:
    """Arrival timestamps in [0, duration) from a gamma renewal process.

    Interarrival times are i.i.d. Gamma(shape=1/cv^2, mean=1/rps); shape 1 is
    exponential, i.e. Poisson arrivals. Deterministic under the spec seed.
    """
    rng = np.random.default_rng(spec.seed)
    shape = 1.0 / (spec.cv * spec.cv)
    scale = (spec.cv * spec.cv) / spec.rps
    chunk = max(int(spec.rps * spec.duration * 1.2) + 64, 64)
    gaps = rng.gamma(shape, scale, size=chunk)
    total = float(gaps.sum())
    while total < spec.duration:
        more = rng.gamma(shape, scale, size=chunk)
        gaps = np.concatenate([gaps, more])
        total += float(more.sum())
    times = np.cumsum(gaps)
    return times[times < spec.duration]


@dataclass
class SpreadTier:
    """One slice of the probe distribution around planted topics.

    ``mode`` is "gauss" (topic plus Gaussian noise sized for an expected
    within-tier cosine of ``value``), "angle" (an exact cosine of ``value`` to
    the topic), "facet" (queries concentrate on one of ``facets`` stable
    sub-modes per cluster, each at exact cosine ``value`` from the topic,
    with within-facet cosine ``within``), or "random" (an unrelated unit
    vector). Facets model clusters whose members only cover their own
    neighborhood while the centroid covers the whole cluster.
    """

    mass: float
    mode: str = "gauss"
    value: float = 0.9
    facets: int = 4
    within: float = 0.95

    def __post_init__(self):
        if self.mode not in ("gauss", "angle", "facet", "random"):
            raise ValueError(f"unknown tier mode {self.mode!r}")
        if self.mass <= 0:
            raise ValueError(f"tier mass must be > 0, got {self.mass}")
        if self.mode != "random" and not 0.0 < self.value < 1.0:
            raise ValueError(f"tier value must be in (0, 1), got {self.value}")
        if self.mode == "facet" and self.facets < 1:
            raise ValueError(f"facets must be >= 1, got {self.facets}")


class PlantedQuerySampler:
    """Draws fresh queries around the planted topics of a synthetic corpus.

    Cluster popularity follows Zipf(``zipf_s``); per-query spread follows the
    configured tiers. ``topic_seed`` must match the seed used to generate the
    corpus so probes target the same planted topics.
    """

    def __init__(
        self,
        n_clusters: int,
        dim: int = DEFAULT_DIM,
        topic_seed: int = 0,
        seed: int = 1,
        zipf_s: float = 1.0,
        tiers: list[SpreadTier] | None = None,
        user_pool: int = 1000,
    ):
        if n_clusters < 1:
            raise ValueError(f"n_clusters must be >= 1, got {n_clusters}")
        self.n_clusters = n_clusters
        self.dim = dim
        self.topic_seed = topic_seed
        self.zipf_s = zipf_s
        self.user_pool = user_pool
        self.tiers = tiers if tiers is not None else [SpreadTier(mass=1.0, mode="gauss", value=0.9)]
        self._topics = np.stack(
            [planted_topic(c, dim, topic_seed) for c in range(n_clusters)]
        ).astype(np.float32)
        weights = np.array([(i + 1.0) ** (-zipf_s) for i in range(n_clusters)])
        self._probs = weights / weights.sum()
        tier_mass = np.array([t.mass for t in self.tiers], dtype=np.float64)
        self._tier_probs = tier_mass / tier_mass.sum()
        self._rng = np.random.default_rng(seed)
        self._facets: dict[tuple[int, int], Vector] = {}
        self._drawn = 0

    def _at_angle(self, base: Vector, cosine: float, direction: np.ndarray) -> Vector:
        b64 = base.astype(np.float64)
        perp = direction.astype(np.float64) - np.dot(direction, b64) * b64
        perp /= np.linalg.norm(perp)
        return (cosine * b64 + math.sqrt(1.0 - cosine * cosine) * perp).astype(np.float32)

    def _facet_center(self, cluster: int, j: int, tier: SpreadTier) -> Vector:
        key = (cluster, j)
        center = self._facets.get(key)
        if center is None:
            direction = synthetic_embed(f"facet-{cluster}-{j}", self.dim, self.topic_seed)
            center = self._at_angle(self._topics[cluster], tier.value, direction)
            self._facets[key] = center
        return center

    def _query_vector(self, cluster: int, tier: SpreadTier) -> Vector:
        topic = self._topics[cluster]
        if tier.mode == "random":
            return normalize(self._rng.standard_normal(self.dim))
        if tier.mode == "gauss":
            sigma = math.sqrt((1.0 / tier.value - 1.0) / self.dim)
            return normalize(topic + sigma * self._rng.standard_normal(self.dim).astype(np.float32))
        if tier.mode == "facet":
            j = int(self._rng.integers(0, tier.facets))
            center = self._facet_center(cluster, j, tier)
            sigma = math.sqrt((1.0 / tier.within - 1.0) / self.dim)
            return normalize(center + sigma * self._rng.standard_normal(self.dim).astype(np.float32))
        # angle: exact cosine to the topic vector
        return self._at_angle(topic, tier.value, self._rng.standard_normal(self.dim))

    def take(self, n: int, t0: float = 0.0, spacing: float = 0.0) -> list[QueryRecord]:
        """Draw ``n`` fresh queries. Timestamps are ``t0 + i * spacing``."""
        out: list[QueryRecord] = []
        for i in range(n):
            cluster = int(self._rng.choice(self.n_clusters, p=self._probs))
            tier = self.tiers[int(self._rng.choice(len(self.tiers), p=self._tier_probs))]
            vec = self._query_vector(cluster, tier)
            label = -1 if tier.mode == "random" else cluster
            k = self._drawn
            self._drawn += 1
            out.append(
                QueryRecord(
                    id=f"s-{k:07d}",
                    user_id=f"user-{int(self._rng.integers(0, self.user_pool)):05d}",
                    timestamp=t0 + i * spacing,
                    text=f"stream query {k} about topic {label}",
                    embedding=vec,
                    response=planted_response(cluster) if label >= 0 else f"response:noise-{k:05d}",
                    cluster_label=label,
                )
            )
        return out


class ReplayQuerySource:
    """Cycles through a fixed record list, embedding any record that lacks a
    vector with the deterministic synthetic embedder."""

    def __init__(self, records: list[QueryRecord], dim: int = DEFAULT_DIM, embed_seed: int = 0):
        if not records:
            raise ValueError("replay source needs at least one record")
        self.records = sorted(records, key=lambda r: (r.timestamp, r.id))
        self.dim = dim
        self.embed_seed = embed_seed
        self._cursor = 0
        for r in self.records:
            if r.embedding is None:
                r.embedding = synthetic_embed(r.text, dim, embed_seed)
            if r.embedding.shape[0] != dim:
                raise ValueError(
                    f"record {r.id}: embedding dimension {r.embedding.shape[0]} != {dim}"
                )

    def take(self, n: int, t0: float = 0.0, spacing: float = 0.0) -> list[QueryRecord]:
        out = []
        for i in range(n):
            src = self.records[self._cursor % len(self.records)]
            self._cursor += 1
            out.append(
                QueryRecord(
                    id=f"r-{self._cursor - 1:07d}",
                    user_id=src.user_id,
                    timestamp=t0 + i * spacing,
                    text=src.text,
                    embedding=src.embedding,
                    response=src.response,
                    cluster_label=src.cluster_label,
                )
            )
        return out


class TokenSampler:
    """Replayable empirical distribution of generated-output token counts."""

    def __init__(self, values: list[int], seed: int = 0):
        if not values:
            raise ValueError("token histogram must be non-empty")
        if any(v < 1 for v in values):
            raise ValueError("token counts must be >= 1")
        self.values = list(values)
        self._rng = np.random.default_rng(seed)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    def draw(self) -> int:
        if len(self.values) == 1:
            return self.values[0]
        return int(self.values[int(self._rng.integers(0, len(self.values)))])


def load_token_histogram(path: str) -> list[int]:
    """Token-length file: one positive integer per line; blanks ignored."""
    values: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                v = int(line)
            except ValueError as exc:
                raise ValueError(f"bad token count on line {lineno}: {line!r}") from exc
            if v < 1:
                raise ValueError(f"bad token count on line {lineno}: {v}")
            values.append(v)
    if not values:
        raise ValueError(f"{path}: no token counts found")
    return values
