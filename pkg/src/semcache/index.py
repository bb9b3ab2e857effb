"""Approximate nearest-neighbor retrieval over cached centroids.

A multi-layer proximity graph whose level assignment is driven by semantic
locality: centroids representing many queries are placed in the upper layers
(by a deterministic rank quota that reproduces the usual exponential level
profile) so that popular probes can terminate early near the top. A standard
random level mode and an exact brute-force scan are provided for paired
benchmarks and recall oracles.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .clustering import Centroid
from .core import Vector

DEFAULT_M = 16
DEFAULT_EF_CONSTRUCTION = 200
DEFAULT_EF_SEARCH = 64
_MAX_RANDOM_LEVEL = 32


@dataclass
class CacheLookupResult:
    """Outcome of one cache lookup, with search-effort instrumentation.

    On a hit, ``similarity`` is recomputed in float64 and is >= the threshold
    used for the lookup. ``best_id``/``best_similarity`` report the best live
    candidate even on a miss.
    """

    outcome: str
    centroid_id: str | None = None
    similarity: float | None = None
    output: str | None = None
    distance_computations: int = 0
    best_id: str | None = None
    best_similarity: float | None = None

    @property
    def is_hit(self) -> bool:
        return self.outcome == "hit"


def assign_level(rank_by_cluster_size: int, total: int, m: int = DEFAULT_M) -> int:
    """Deterministic quota level: the maximal l with rank < round(total * m**-l).

    Rank 0 is the largest cluster_size. Uses Python round (half to even).
    """
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    if not 0 <= rank_by_cluster_size < total:
        raise ValueError(f"rank {rank_by_cluster_size} out of range for total {total}")
    level = 0
    while True:
        cap = round(total * (1.0 / m) ** (level + 1))
        if rank_by_cluster_size < cap:
            level += 1
        else:
            return level


class HnswIndex:
    """Hierarchical small-world graph over unit vectors, similarity-maximizing.

    Nodes present at level l appear at every lower level; neighbor lists hold
    at most M entries (2M at level 0); removal tombstones the node and keeps
    it for routing until :meth:`compact`.
    """

    def __init__(
        self,
        dim: int,
        m: int = DEFAULT_M,
        ef_construction: int = DEFAULT_EF_CONSTRUCTION,
        ef_search: int = DEFAULT_EF_SEARCH,
        level_mode: str = "locality",
        seed: int = 0,
    ):
        if level_mode not in ("locality", "random"):
            raise ValueError(f"unknown level_mode {level_mode!r}")
        self.dim = dim
        self.m = m
        self.m0 = 2 * m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.level_mode = level_mode
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._vecs = np.zeros((0, dim), dtype=np.float32)
        self._ids: list[str] = []
        self._outputs: list[str] = []
        self._sizes: list[float] = []
        self._levels: list[int] = []
        self._links: list[list[list[int]]] = []
        self._deleted: list[bool] = []
        self._id_to_slot: dict[str, int] = {}
        self._entry: int | None = None
        self._max_level = -1
        self._live = 0
        self.distance_computations = 0

    def __len__(self) -> int:
        return self._live

    # -- primitives -----------------------------------------------------------

    def _sims(self, slots: list[int], q: Vector) -> np.ndarray:
        self.distance_computations += len(slots)
        return self._vecs[slots] @ q

    def _sim64(self, slot: int, q: Vector) -> float:
        return float(
            np.dot(self._vecs[slot].astype(np.float64), np.asarray(q, dtype=np.float64))
        )

    def _grow(self, id_: str, vector: Vector, level: int, cluster_size: float, output: str) -> int:
        slot = len(self._ids)
        if slot >= self._vecs.shape[0]:
            new_cap = max(16, self._vecs.shape[0] * 2)
            grown = np.zeros((new_cap, self.dim), dtype=np.float32)
            grown[: self._vecs.shape[0]] = self._vecs[: self._vecs.shape[0]]
            self._vecs = grown
        self._vecs[slot] = vector
        self._ids.append(id_)
        self._outputs.append(output)
        self._sizes.append(cluster_size)
        self._levels.append(level)
        self._links.append([[] for _ in range(level + 1)])
        self._deleted.append(False)
        self._id_to_slot[id_] = slot
        self._live += 1
        return slot

    def _draw_level(self, cluster_size: float, id_: str) -> int:
        if self.level_mode == "random":
            u = 1.0 - float(self._rng.random())
            return min(int(-math.log(u) / math.log(self.m)), _MAX_RANDOM_LEVEL)
        # Incremental inserts rank against the current population; bulk builds
        # pass explicit levels computed against the final total instead.
        rank = 0
        for s in range(len(self._ids)):
            if self._deleted[s]:
                continue
            if self._sizes[s] > cluster_size or (
                self._sizes[s] == cluster_size and self._ids[s] < id_
            ):
                rank += 1
        return assign_level(rank, self._live + 1, self.m)

    def _greedy(self, q: Vector, start: int, start_sim: float, level: int) -> tuple[int, float]:
        cur, cur_sim = start, start_sim
        while True:
            neighbors = self._links[cur][level]
            if not neighbors:
                return cur, cur_sim
            sims = self._sims(neighbors, q)
            best = int(np.argmax(sims))
            if float(sims[best]) > cur_sim:
                cur, cur_sim = neighbors[best], float(sims[best])
            else:
                return cur, cur_sim

    def _search_layer(
        self, q: Vector, entries: list[tuple[float, int]], ef: int, level: int
    ) -> list[tuple[float, int]]:
        visited = {slot for _, slot in entries}
        candidates = [(-sim, slot) for sim, slot in entries]
        heapq.heapify(candidates)
        results = [(sim, slot) for sim, slot in entries]
        heapq.heapify(results)
        while candidates:
            neg, slot = heapq.heappop(candidates)
            if len(results) >= ef and -neg < results[0][0]:
                break
            fresh = [n for n in self._links[slot][level] if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            sims = self._sims(fresh, q)
            for n, sim in zip(fresh, sims):
                sim = float(sim)
                if len(results) < ef or sim > results[0][0]:
                    heapq.heappush(candidates, (-sim, n))
                    heapq.heappush(results, (sim, n))
                    if len(results) > ef:
                        heapq.heappop(results)
        return sorted(results, key=lambda r: (-r[0], r[1]))

    def _select_neighbors(
        self, candidates: list[tuple[float, int]], m: int
    ) -> list[tuple[float, int]]:
        """Diversified neighbor pick: keep a candidate only if it is closer to
        the query than to anything already selected; backfill from the pruned
        ones by proximity."""
        selected: list[tuple[float, int]] = []
        sel_slots: list[int] = []
        pruned: list[tuple[float, int]] = []
        for sim, slot in sorted(candidates, key=lambda r: (-r[0], r[1])):
            if len(selected) >= m:
                break
            if sel_slots:
                self.distance_computations += len(sel_slots)
                to_selected = self._vecs[sel_slots] @ self._vecs[slot]
                keep = not bool((to_selected > sim).any())
            else:
                keep = True
            if keep:
                selected.append((sim, slot))
                sel_slots.append(slot)
            else:
                pruned.append((sim, slot))
        for sim, slot in pruned:
            if len(selected) >= m:
                break
            selected.append((sim, slot))
        return selected

    def _shrink_links(self, slot: int, level: int, m_max: int) -> None:
        links = self._links[slot][level]
        if len(links) <= m_max:
            return
        sims = self._sims(links, self._vecs[slot])
        ranked = [(float(s), n) for s, n in zip(sims, links)]
        self._links[slot][level] = [n for _, n in self._select_neighbors(ranked, m_max)]

    # -- mutation ---------------------------------------------------------------

    def insert(self, centroid: Centroid, level: int | None = None) -> None:
        """Insert one centroid; its level follows the index's level mode unless given."""
        if centroid.id in self._id_to_slot:
            raise ValueError(f"duplicate id: {centroid.id}")
        vector = np.asarray(centroid.vector, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise ValueError(f"expected dimension {self.dim}, got {vector.shape}")
        if level is None:
            level = self._draw_level(centroid.cluster_size, centroid.id)
        slot = self._grow(centroid.id, vector, level, centroid.cluster_size, centroid.output)
        if self._entry is None:
            self._entry = slot
            self._max_level = level
            return
        q = vector
        cur = self._entry
        cur_sim = float(self._sims([cur], q)[0])
        for lev in range(self._max_level, level, -1):
            cur, cur_sim = self._greedy(q, cur, cur_sim, lev)
        eps = [(cur_sim, cur)]
        for lev in range(min(level, self._max_level), -1, -1):
            found = self._search_layer(q, eps, self.ef_construction, lev)
            m_max = self.m0 if lev == 0 else self.m
            neighbors = self._select_neighbors(found, self.m)
            self._links[slot][lev] = [s for _, s in neighbors]
            for sim, nb in neighbors:
                self._links[nb][lev].append(slot)
                self._shrink_links(nb, lev, m_max)
            eps = found
        if level > self._max_level:
            self._max_level = level
            self._entry = slot

    def remove(self, centroid_id: str) -> None:
        """Tombstone a node: never returned again, still usable for routing."""
        slot = self._id_to_slot.get(centroid_id)
        if slot is None:
            raise KeyError(f"unknown centroid id: {centroid_id}")
        self._deleted[slot] = True
        del self._id_to_slot[centroid_id]
        self._live -= 1

    @property
    def tombstone_fraction(self) -> float:
        total = len(self._ids)
        return 0.0 if total == 0 else (total - self._live) / total

    def compact(self) -> None:
        """Rebuild the graph without tombstones (an epoch-boundary operation)."""
        live = [
            Centroid(
                id=self._ids[s],
                vector=self._vecs[s].copy(),
                output=self._outputs[s],
                cluster_size=self._sizes[s],
            )
            for s in range(len(self._ids))
            if not self._deleted[s]
        ]
        fresh = build_index(
            live,
            dim=self.dim,
            m=self.m,
            ef_construction=self.ef_construction,
            ef_search=self.ef_search,
            level_mode=self.level_mode,
            seed=self.seed,
        )
        fresh.distance_computations = self.distance_computations
        self.__dict__.update(fresh.__dict__)

    # -- search -----------------------------------------------------------------

    def search(
        self,
        query: Vector,
        theta_r: float,
        ef_search: int | None = None,
        early_terminate: bool = True,
    ) -> CacheLookupResult:
        """Greedy descent with optional early termination above ``theta_r``.

        At each level >= 1, if the best live candidate so far already clears
        the threshold the descent stops and that candidate is returned (a valid
        hit by the cache contract, though not necessarily the global top-1).
        Level 0 runs a full beam of width ``ef_search``.
        """
        if not 0.0 < theta_r < 1.0:
            raise ValueError(f"theta_r must be in (0, 1), got {theta_r}")
        q = np.asarray(query, dtype=np.float32)
        if q.shape != (self.dim,):
            raise ValueError(f"expected dimension {self.dim}, got {q.shape}")
        before = self.distance_computations
        if self._entry is None or self._live == 0:
            return CacheLookupResult(outcome="miss", distance_computations=0)

        best_slot = -1
        best_sim = -2.0

        def consider(slots: list[int], sims: np.ndarray) -> None:
            nonlocal best_slot, best_sim
            for s, sim in zip(slots, sims):
                sim = float(sim)
                if self._deleted[s]:
                    continue
                if sim > best_sim or (sim == best_sim and (best_slot < 0 or self._ids[s] < self._ids[best_slot])):
                    best_slot, best_sim = s, sim

        cur = self._entry
        sims0 = self._sims([cur], q)
        consider([cur], sims0)
        cur_sim = float(sims0[0])
        for level in range(self._max_level, 0, -1):
            while True:
                neighbors = self._links[cur][level]
                if not neighbors:
                    break
                sims = self._sims(neighbors, q)
                consider(neighbors, sims)
                nxt = int(np.argmax(sims))
                if float(sims[nxt]) > cur_sim:
                    cur, cur_sim = neighbors[nxt], float(sims[nxt])
                else:
                    break
            if early_terminate and best_slot >= 0 and best_sim >= theta_r:
                exact = self._sim64(best_slot, q)
                if exact >= theta_r:
                    return self._hit(best_slot, exact, before)
        ef = ef_search if ef_search is not None else self.ef_search
        found = self._search_layer(q, [(cur_sim, cur)], ef, 0)
        for sim, slot in found:
            consider([slot], np.asarray([sim], dtype=np.float32))
        if best_slot < 0:
            return CacheLookupResult(
                outcome="miss", distance_computations=self.distance_computations - before
            )
        exact = self._sim64(best_slot, q)
        if exact >= theta_r:
            return self._hit(best_slot, exact, before)
        return CacheLookupResult(
            outcome="miss",
            distance_computations=self.distance_computations - before,
            best_id=self._ids[best_slot],
            best_similarity=exact,
        )

    def _hit(self, slot: int, similarity: float, before: int) -> CacheLookupResult:
        return CacheLookupResult(
            outcome="hit",
            centroid_id=self._ids[slot],
            similarity=similarity,
            output=self._outputs[slot],
            distance_computations=self.distance_computations - before,
            best_id=self._ids[slot],
            best_similarity=similarity,
        )

    # -- introspection ------------------------------------------------------------

    def stats(self) -> dict:
        level_counts: dict[int, int] = {}
        degree_sum = 0
        for s in range(len(self._ids)):
            if self._deleted[s]:
                continue
            level_counts[self._levels[s]] = level_counts.get(self._levels[s], 0) + 1
            degree_sum += len(self._links[s][0])
        return {
            "live_nodes": self._live,
            "tombstones": len(self._ids) - self._live,
            "max_level": self._max_level,
            "nodes_by_level": {str(k): level_counts[k] for k in sorted(level_counts)},
            "mean_degree_level0": (degree_sum / self._live) if self._live else 0.0,
            "distance_computations": self.distance_computations,
            "m": self.m,
            "ef_construction": self.ef_construction,
            "ef_search": self.ef_search,
            "level_mode": self.level_mode,
        }

    def level_of(self, centroid_id: str) -> int:
        return self._levels[self._id_to_slot[centroid_id]]


def build_index(
    centroids: list[Centroid],
    dim: int | None = None,
    m: int = DEFAULT_M,
    ef_construction: int = DEFAULT_EF_CONSTRUCTION,
    ef_search: int = DEFAULT_EF_SEARCH,
    level_mode: str = "locality",
    seed: int = 0,
) -> HnswIndex:
    """Build an index over centroids, inserting in descending cluster_size order.

    With locality levels, descending insertion makes each node's quota rank
    equal to its insertion position, so upper layers form first.
    """
    ids = [c.id for c in centroids]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate centroid ids")
    if dim is None:
        if not centroids:
            raise ValueError("dim is required for an empty index")
        dim = int(centroids[0].vector.shape[0])
    index = HnswIndex(
        dim,
        m=m,
        ef_construction=ef_construction,
        ef_search=ef_search,
        level_mode=level_mode,
        seed=seed,
    )
    ordered = sorted(centroids, key=lambda c: (-c.cluster_size, c.id))
    total = len(ordered)
    for rank, c in enumerate(ordered):
        # locality levels use the final population so quotas are exact
        level = assign_level(rank, total, m) if level_mode == "locality" else None
        index.insert(c, level=level)
    return index


def brute_force_search(
    centroids: list[Centroid], query: Vector, theta_r: float
) -> CacheLookupResult:
    """Exact argmax-by-cosine scan; hit iff the max clears ``theta_r``.

    Ties break toward the lowest id. This is the recall oracle for the graph
    index.
    """
    if not centroids:
        return CacheLookupResult(outcome="miss", distance_computations=0)
    q = np.asarray(query, dtype=np.float32)
    matrix = np.stack([c.vector for c in centroids]).astype(np.float32)
    sims = matrix @ q
    top = float(sims.max())
    ties = np.flatnonzero(sims == top)
    best = min((int(i) for i in ties), key=lambda i: centroids[i].id)
    exact = float(
        np.dot(centroids[best].vector.astype(np.float64), q.astype(np.float64))
    )
    if exact >= theta_r:
        return CacheLookupResult(
            outcome="hit",
            centroid_id=centroids[best].id,
            similarity=exact,
            output=centroids[best].output,
            distance_computations=len(centroids),
            best_id=centroids[best].id,
            best_similarity=exact,
        )
    return CacheLookupResult(
        outcome="miss",
        distance_computations=len(centroids),
        best_id=centroids[best].id,
        best_similarity=exact,
    )
