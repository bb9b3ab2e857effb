"""Semantic cache state and its replacement machinery.

Replacement runs in three steps: merge repository centroids into the live set,
filter the combined set down to capacity, then swap the live set in small
batches so lookups stay available throughout. Baseline single-vector policies
(LRU, LFU, FIFO, RR) live here too for benchmark comparisons.
"""

from __future__ import annotations

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np

from .clustering import INFINITE_ACCESS, Centroid, CentroidRepository
from .core import Vector

logger = logging.getLogger(__name__)

FIXED_ENTRY_OVERHEAD = 64
DEFAULT_DECAY = 1.1
DEFAULT_BATCH_SIZE = 64

BASELINE_POLICIES = ("lru", "lfu", "fifo", "rr")


def entry_cost_bytes(dim: int, output: str) -> int:
    """Memory model: 4 bytes per vector component + output bytes + fixed overhead."""
    return dim * 4 + len(output.encode("utf-8")) + FIXED_ENTRY_OVERHEAD


def centroid_cost_bytes(c: Centroid) -> int:
    return entry_cost_bytes(int(c.vector.shape[0]), c.output)


def _filter_key(c: Centroid) -> tuple[float, float, str]:
    # Ascending eviction order; INFINITE_ACCESS sorts last, so fresh merges
    # are maximally protected.
    return (c.cluster_size, c.access_count, c.id)


def merge_centroids(
    c_cur: list[Centroid], c_repo: list[Centroid], theta_c: float
) -> list[Centroid]:
    """Fold repository centroids into a copy of the current cache set.

    Each repository centroid either donates its cluster_size to the single
    closest centroid already in the working set (cosine strictly above
    ``theta_c``) or is appended with its access count pinned to the
    infinity sentinel.
    """
    merged = [c.copy() for c in c_cur]
    if merged:
        dim = merged[0].vector.shape[0]
    elif c_repo:
        dim = c_repo[0].vector.shape[0]
    else:
        return merged
    buf = np.zeros((max(len(merged) + len(c_repo), 1), dim), dtype=np.float32)
    for i, c in enumerate(merged):
        buf[i] = c.vector
    for repo_c in c_repo:
        n = len(merged)
        if n > 0:
            sims = buf[:n] @ repo_c.vector
            top = float(sims.max())
            ties = np.flatnonzero(sims == top)
            best = min((int(i) for i in ties), key=lambda i: merged[i].id)
            if top > theta_c:
                merged[best].cluster_size += repo_c.cluster_size
                continue
        appended = repo_c.copy()
        appended.access_count = INFINITE_ACCESS
        buf[n] = appended.vector
        merged.append(appended)
    return merged


def filter_centroids(
    c_new: list[Centroid],
    capacity_bytes: int,
    decay: float = DEFAULT_DECAY,
) -> list[Centroid]:
    """Evict under ascending (cluster_size, access_count, id) until within capacity.

    Survivors have cluster_size divided by ``decay`` and access counts reset
    to zero. Keys never change during eviction, so one sort plus front removal
    is equivalent to re-sorting every round.
    """
    if capacity_bytes <= 0:
        raise ValueError(f"capacity_bytes must be positive, got {capacity_bytes}")
    ordered = sorted((c.copy() for c in c_new), key=_filter_key)
    usage = sum(centroid_cost_bytes(c) for c in ordered)
    start = 0
    while usage > capacity_bytes and start < len(ordered):
        usage -= centroid_cost_bytes(ordered[start])
        start += 1
    kept = ordered[start:]
    if not kept and c_new:
        logger.warning(
            "capacity %d bytes cannot hold a single centroid; cache left empty",
            capacity_bytes,
        )
    for c in kept:
        c.cluster_size /= decay
        c.access_count = 0.0
    return kept


@dataclass
class OverflowEntry:
    id: str
    vector: Vector
    output: str
    cost: int


class SemanticCacheState:
    """Live centroid set plus an LRU overflow region for individual vectors.

    Total memory (centroids + overflow) never exceeds ``capacity_bytes`` after
    a completed replacement. Centroids have priority; the overflow region only
    uses whatever capacity they leave behind.
    """

    def __init__(
        self,
        capacity_bytes: int,
        overflow_enabled: bool = True,
        decay: float = DEFAULT_DECAY,
        batch_size: int = DEFAULT_BATCH_SIZE,
    ):
        if capacity_bytes <= 0:
            raise ValueError(f"capacity_bytes must be positive, got {capacity_bytes}")
        self.capacity_bytes = capacity_bytes
        self.overflow_enabled = overflow_enabled
        self.decay = decay
        self.batch_size = batch_size
        self.centroids: dict[str, Centroid] = {}
        self.overflow: OrderedDict[str, OverflowEntry] = OrderedDict()
        self.epoch = 0
        self.replacement_log: list[dict] = []
        self._update_in_flight = False
        self._matrix_ids: list[str] = []
        self._matrix: np.ndarray | None = None
        self._matrix_dirty = True
        self._overflow_matrix: np.ndarray | None = None
        self._overflow_ids: list[str] = []
        self._overflow_dirty = True

    # -- accounting ---------------------------------------------------------

    @property
    def centroid_bytes(self) -> int:
        return sum(centroid_cost_bytes(c) for c in self.centroids.values())

    @property
    def overflow_bytes(self) -> int:
        return sum(e.cost for e in self.overflow.values())

    @property
    def used_bytes(self) -> int:
        return self.centroid_bytes + self.overflow_bytes

    # -- lookups ------------------------------------------------------------

    def _refresh_matrices(self) -> None:
        if self._matrix_dirty:
            self._matrix_ids = list(self.centroids.keys())
            if self._matrix_ids:
                self._matrix = np.stack(
                    [self.centroids[i].vector for i in self._matrix_ids]
                ).astype(np.float32)
            else:
                self._matrix = None
            self._matrix_dirty = False
        if self._overflow_dirty:
            self._overflow_ids = list(self.overflow.keys())
            if self._overflow_ids:
                self._overflow_matrix = np.stack(
                    [self.overflow[i].vector for i in self._overflow_ids]
                ).astype(np.float32)
            else:
                self._overflow_matrix = None
            self._overflow_dirty = False

    def lookup(self, query: Vector, theta: float):
        """Exact scan over centroids and overflow entries.

        Returns ``(kind, entry_id, similarity, output)`` for the best entry at
        or above ``theta`` (``kind`` is "centroid" or "overflow"), or None on a
        miss. Read-only: hit bookkeeping is the caller's job.
        """
        self._refresh_matrices()
        best: tuple[float, str, str, str] | None = None
        if self._matrix is not None:
            sims = self._matrix @ query
            top = float(sims.max())
            ties = np.flatnonzero(sims == top)
            cid = min(self._matrix_ids[int(i)] for i in ties)
            best = (top, "centroid", cid, self.centroids[cid].output)
        if self._overflow_matrix is not None:
            sims = self._overflow_matrix @ query
            top = float(sims.max())
            if best is None or top > best[0]:
                ties = np.flatnonzero(sims == top)
                oid = min(self._overflow_ids[int(i)] for i in ties)
                best = (top, "overflow", oid, self.overflow[oid].output)
        if best is None or best[0] < theta:
            return None
        return (best[1], best[2], best[0], best[3])

    def overflow_lookup(self, query: Vector, theta: float):
        """Exact scan over the overflow region only."""
        self._refresh_matrices()
        if self._overflow_matrix is None:
            return None
        sims = self._overflow_matrix @ query
        top = float(sims.max())
        if top < theta:
            return None
        ties = np.flatnonzero(sims == top)
        oid = min(self._overflow_ids[int(i)] for i in ties)
        return ("overflow", oid, top, self.overflow[oid].output)

    # -- centroid bookkeeping -------------------------------------------------

    def record_hit(self, centroid_id: str) -> None:
        """Bump a live centroid's access count (the infinity sentinel absorbs)."""
        if centroid_id not in self.centroids:
            raise KeyError(f"unknown centroid id: {centroid_id}")
        self.centroids[centroid_id].access_count += 1

    # -- overflow region ------------------------------------------------------

    def overflow_touch(self, entry_id: str) -> None:
        self.overflow.move_to_end(entry_id)

    def overflow_insert(self, entry_id: str, vector: Vector, output: str) -> bool:
        """Cache an individual vector in leftover capacity, LRU-evicting to fit."""
        if not self.overflow_enabled:
            return False
        cost = entry_cost_bytes(int(vector.shape[0]), output)
        budget = self.capacity_bytes - self.centroid_bytes
        if cost > budget:
            return False
        while self.overflow and self.overflow_bytes + cost > budget:
            self.overflow.popitem(last=False)
        self.overflow[entry_id] = OverflowEntry(entry_id, vector, output, cost)
        self._overflow_dirty = True
        return True

    def _trim_overflow(self) -> None:
        budget = self.capacity_bytes - self.centroid_bytes
        while self.overflow and self.overflow_bytes > budget:
            self.overflow.popitem(last=False)
            self._overflow_dirty = True

    # -- replacement ----------------------------------------------------------

    def update_centroids(
        self,
        c_new: list[Centroid],
        batch_size: int | None = None,
        on_batch: Callable[["SemanticCacheState"], None] | None = None,
    ) -> int:
        """Swap the live set over to ``c_new`` in batches of atomic per-id steps.

        Between batches the cache keeps answering lookups against a consistent
        mixed set: every centroid is either fully old or fully new. Only one
        update may run at a time. Returns the new epoch.
        """
        if self._update_in_flight:
            raise RuntimeError("a replacement update is already in flight")
        self._update_in_flight = True
        try:
            batch = batch_size if batch_size is not None else self.batch_size
            if batch < 1:
                raise ValueError(f"batch_size must be >= 1, got {batch}")
            target: dict[str, Centroid] = {}
            for c in c_new:
                if c.id in target:
                    raise ValueError(f"duplicate centroid id in update: {c.id}")
                target[c.id] = c
            ops: list[tuple[str, str, Centroid | None]] = []
            for cid in self.centroids:
                if cid not in target:
                    ops.append(("del", cid, None))
            for cid, c in target.items():
                old = self.centroids.get(cid)
                if old is None or not _same_centroid(old, c):
                    ops.append(("set", cid, c))
            for start in range(0, len(ops), batch):
                for op, cid, payload in ops[start : start + batch]:
                    if op == "del":
                        del self.centroids[cid]
                    else:
                        self.centroids[cid] = payload
                self._matrix_dirty = True
                if on_batch is not None:
                    on_batch(self)
            self._trim_overflow()
            self.epoch += 1
            return self.epoch
        finally:
            self._update_in_flight = False


def _same_centroid(a: Centroid, b: Centroid) -> bool:
    return (
        a.id == b.id
        and a.cluster_size == b.cluster_size
        and a.access_count == b.access_count
        and a.output == b.output
        and np.array_equal(a.vector, b.vector)
    )


def run_replacement(
    cache: SemanticCacheState,
    repo: CentroidRepository,
    theta_c: float | None = None,
    batch_size: int | None = None,
    log_sink: Callable[[dict], None] | None = None,
) -> int:
    """Merge, filter, and progressively apply one full replacement round."""
    if cache.centroids and repo.centroids:
        live_dim = next(iter(cache.centroids.values())).vector.shape[0]
        if live_dim != repo.dim:
            raise ValueError(f"dimension mismatch: cache {live_dim}, repository {repo.dim}")
    theta = theta_c if theta_c is not None else repo.theta_c
    started = time.perf_counter()
    current = list(cache.centroids.values())
    bytes_before = cache.used_bytes
    merged = merge_centroids(current, repo.centroids, theta)
    appended = len(merged) - len(current)
    filtered = filter_centroids(merged, cache.capacity_bytes, decay=cache.decay)
    epoch = cache.update_centroids(filtered, batch_size=batch_size)
    event = {
        "epoch": epoch,
        "merged": len(repo.centroids) - appended,
        "appended": appended,
        "evicted": len(merged) - len(filtered),
        "bytes_before": bytes_before,
        "bytes_after": cache.used_bytes,
        "duration_ms": (time.perf_counter() - started) * 1000.0,
    }
    cache.replacement_log.append(event)
    if log_sink is not None:
        log_sink(event)
    return epoch


# ---------------------------------------------------------------------------
# Baseline replacement policies over individual query vectors
# ---------------------------------------------------------------------------


@dataclass
class _BaselineEntry:
    vector: Vector
    output: str
    freq: int
    insert_seq: int
    touch_seq: int
    slot: int


@dataclass
class BaselineStep:
    hit: bool
    entry_id: str | None
    similarity: float | None
    evicted_id: str | None


class BaselineCache:
    """Fixed-entry-count cache of individual vectors under a classical policy.

    Policies: ``lru`` (evict least recently used), ``lfu`` (least frequently
    used, recency tie-break), ``fifo`` (oldest insertion), ``rr`` (rotating
    slot cursor, seeded). Decisions are deterministic given the access
    sequence.
    """

    def __init__(self, capacity_entries: int, policy: str, seed: int = 0):
        if capacity_entries < 1:
            raise ValueError(f"capacity_entries must be >= 1, got {capacity_entries}")
        if policy not in BASELINE_POLICIES:
            raise ValueError(f"unknown policy {policy!r}; expected one of {BASELINE_POLICIES}")
        self.capacity = capacity_entries
        self.policy = policy
        self.entries: dict[str, _BaselineEntry] = {}
        self._seq = 0
        self._cursor = seed % capacity_entries
        self._slots: list[str | None] = [None] * capacity_entries
        self._matrix: np.ndarray | None = None
        self._matrix_ids: list[str] = []
        self._dirty = True

    def __len__(self) -> int:
        return len(self.entries)

    def _tick(self) -> int:
        self._seq += 1
        return self._seq

    def lookup(self, query: Vector, theta: float):
        """Best entry at or above ``theta`` as ``(id, similarity, output)``, else None."""
        if not self.entries:
            return None
        if self._dirty:
            self._matrix_ids = list(self.entries.keys())
            self._matrix = np.stack(
                [self.entries[k].vector for k in self._matrix_ids]
            ).astype(np.float32)
            self._dirty = False
        sims = self._matrix @ query
        top = float(sims.max())
        if top < theta:
            return None
        ties = np.flatnonzero(sims == top)
        eid = min(self._matrix_ids[int(i)] for i in ties)
        return (eid, top, self.entries[eid].output)

    def on_hit(self, entry_id: str) -> None:
        e = self.entries[entry_id]
        e.freq += 1
        e.touch_seq = self._tick()

    def _victim(self) -> str:
        if self.policy == "lru":
            return min(self.entries, key=lambda k: self.entries[k].touch_seq)
        if self.policy == "lfu":
            return min(self.entries, key=lambda k: (self.entries[k].freq, self.entries[k].touch_seq))
        if self.policy == "fifo":
            return min(self.entries, key=lambda k: self.entries[k].insert_seq)
        # rr: advance the cursor to the next occupied slot and evict it
        for _ in range(self.capacity):
            key = self._slots[self._cursor]
            self._cursor = (self._cursor + 1) % self.capacity
            if key is not None and key in self.entries:
                return key
        raise RuntimeError("round-robin cursor found no occupied slot")

    def insert(self, entry_id: str, vector: Vector, output: str) -> str | None:
        """Insert a new entry, evicting per policy when full. Returns the victim id."""
        if entry_id in self.entries:
            raise ValueError(f"duplicate entry id: {entry_id}")
        evicted = None
        if len(self.entries) >= self.capacity:
            evicted = self._victim()
            slot = self.entries[evicted].slot
            del self.entries[evicted]
            self._slots[slot] = None
        slot = self._slots.index(None)
        seq = self._tick()
        self.entries[entry_id] = _BaselineEntry(
            vector=vector, output=output, freq=1, insert_seq=seq, touch_seq=seq, slot=slot
        )
        self._slots[slot] = entry_id
        self._dirty = True
        return evicted


def baseline_step(
    cache: BaselineCache,
    entry_id: str,
    query: Vector,
    theta: float,
    output: str,
) -> BaselineStep:
    """One hit-or-miss event: touch on hit, insert (and maybe evict) on miss."""
    found = cache.lookup(query, theta)
    if found is not None:
        hit_id, sim, _ = found
        cache.on_hit(hit_id)
        return BaselineStep(hit=True, entry_id=hit_id, similarity=sim, evicted_id=None)
    evicted = cache.insert(entry_id, query, output)
    return BaselineStep(hit=False, entry_id=entry_id, similarity=None, evicted_id=evicted)
