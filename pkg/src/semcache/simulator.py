"""Discrete-event serving simulator wired around the semantic cache.

A virtual-clock event loop drives the full pipeline: embed, repeated-query
check, cache lookup at the current retrieval threshold, and a mock backend
with TTFT/TBT latency behind a FIFO multi-server queue. Cache hits bypass the
backend entirely, which is exactly the structure the controller's queue model
assumes. Everything is deterministic under the run seed; repeated runs produce
byte-identical reports.
"""

from __future__ import annotations

import csv
import heapq
import json
import logging
import threading
import time as _time
from bisect import bisect_right, insort
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .cache import (
    BaselineCache,
    SemanticCacheState,
    entry_cost_bytes,
    run_replacement,
)
from .clustering import Centroid, build_repository, should_recluster
from .controller import (
    ControllerState,
    SloConfig,
    T2HTable,
    build_t2h,
    choose_theta,
    default_grid,
    estimate_wait,
    feedback_adjust,
    update_lambda,
)
from .core import QueryRecord, Vector, planted_response, generate_planted_corpus
from .index import CacheLookupResult, HnswIndex, build_index
from .workload import (
    PlantedQuerySampler,
    ReplayQuerySource,
    SpreadTier,
    TokenSampler,
    WorkloadSpec,
    generate_arrivals,
)

logger = logging.getLogger(__name__)

MODES = ("siso", "siso-nodta", "gptcache-lru", "vllm-only", "lfu", "fifo", "rr")
CENTROID_MODES = ("siso", "siso-nodta")
BASELINE_MODE_POLICY = {"gptcache-lru": "lru", "lfu": "lfu", "fifo": "fifo", "rr": "rr"}


@dataclass
class MockLlmConfig:
    """Backend latency model: TTFT + TBT per additional generated token."""

    ttft: float = 0.5
    tbt: float = 0.05
    output_tokens: list[int] = field(default_factory=lambda: [11])
    servers: int = 1

    def __post_init__(self):
        if self.ttft <= 0 or self.tbt <= 0:
            raise ValueError("ttft and tbt must be > 0")
        if self.servers < 1:
            raise ValueError("servers must be >= 1")
        if any(v < 1 for v in self.output_tokens):
            raise ValueError("token counts must be >= 1")

    @property
    def mean_service(self) -> float:
        return self.ttft + self.tbt * (float(np.mean(self.output_tokens)) - 1.0)


def mock_llm_service_time(cfg: MockLlmConfig, n_tokens: int) -> float:
    """Deterministic generation time for ``n_tokens`` output tokens."""
    if n_tokens < 1:
        raise ValueError(f"token count must be >= 1, got {n_tokens}")
    return cfg.ttft + cfg.tbt * (n_tokens - 1)


@dataclass
class RequestRecord:
    """Per-request timeline entry for SLO accounting."""

    query_id: str
    arrival_t: float
    dequeue_t: float
    completion_t: float
    served_by: str  # cache | llm | rejected
    e2e_latency: float
    unloaded_e2e: float
    slo_ok: bool
    theta_at_service: float
    n_tokens: int = 0
    repeat_bypass: bool = False
    cluster_label: int | None = None
    # queueing + service delay inside the backend; zero for cache-served
    backend_sojourn: float = 0.0


@dataclass
class SimConfig:
    """Full system configuration for one simulation run."""

    mode: str = "siso"
    dim: int = 256
    seed: int = 0
    # planted training corpus
    n_clusters: int = 200
    per_cluster: int = 20
    intra_sim: float = 0.90
    corpus_zipf_s: float = 1.0
    # probe stream
    stream_zipf_s: float = 1.0
    tiers: list[SpreadTier] | None = None
    user_pool: int = 1000
    # cache
    capacity_fraction: float = 0.06
    capacity_entries: int | None = None
    overflow_enabled: bool = True
    theta_c: float = 0.86
    min_community_size: int = 2
    decay: float = 1.1
    update_batch_size: int = 64
    # retrieval
    theta_fixed: float = 0.86
    lookup_backend: str = "hnsw"  # hnsw | exact
    hnsw_m: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    # controller
    window_seconds: float = 10.0
    grid: list[float] | None = None
    slo_multiplier: float = 1.3
    slo_latency: float | None = None
    t2h_pool: int = 4000
    t2h_sample_fraction: float = 0.05
    dta_enabled: bool | None = None
    # backend
    ttft: float = 0.5
    tbt: float = 0.05
    output_tokens: list[int] = field(default_factory=lambda: [11])
    servers: int = 1
    queue_bound: int | None = None
    # cache-path latency (seconds)
    embed_latency: float = 0.00263
    search_hit_latency: float = 0.01392
    search_miss_latency: float = 0.01616
    # repeated-query routing
    repeat_detection: bool = True
    repeat_history: int = 8
    repeat_window: float = 300.0
    repeat_threshold: float = 0.95
    # re-clustering during the run
    recluster_enabled: bool = False
    recluster_fraction: float = 0.10
    # measurement
    steady_after: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lookup_backend not in ("hnsw", "exact"):
            raise ValueError(f"unknown lookup_backend {self.lookup_backend!r}")

    def llm_config(self) -> MockLlmConfig:
        return MockLlmConfig(
            ttft=self.ttft, tbt=self.tbt, output_tokens=list(self.output_tokens),
            servers=self.servers,
        )

    def slo_config(self) -> SloConfig:
        return SloConfig(slo_multiplier=self.slo_multiplier, ttft=self.ttft, tbt=self.tbt)


def _subseed(seed: int, salt: int) -> int:
    return (seed * 1_000_003 + salt) % (2**32)


def detect_repeat(
    history: Iterable[tuple[float, Vector]],
    embedding: Vector,
    now: float,
    window_seconds: float,
    threshold: float,
) -> bool:
    """True iff a prior same-user embedding within the window clears the threshold."""
    for ts, vec in history:
        if now - ts > window_seconds:
            continue
        if float(vec @ embedding) >= threshold:
            return True
    return False


class ServingSystem:
    """Cache, retrieval backend, and controller state for one serving run."""

    def __init__(self, config: SimConfig, train_log: list[QueryRecord] | None = None,
                 t2h_source=None):
        self.config = config
        self.mode = config.mode
        self.llm = config.llm_config()
        self.slo = config.slo_config()
        self.tokens = TokenSampler(list(config.output_tokens), seed=_subseed(config.seed, 2))
        self.grid = list(config.grid) if config.grid is not None else default_grid()
        self.cache: SemanticCacheState | None = None
        self.index: HnswIndex | None = None
        self.baseline: BaselineCache | None = None
        self.table: T2HTable | None = None
        self.controller: ControllerState | None = None
        self.dta = config.dta_enabled
        if self.dta is None:
            self.dta = config.mode == "siso"
        self.capacity_entries = 0
        self.capacity_bytes = 0
        self.initial_query_count = 0
        self.lookup_count = 0
        self.exact_computations = 0
        self._user_history: dict[str, deque] = {}
        self._service_sum = 0.0
        self._service_n = 0
        self.train_log = train_log
        self._t2h_source = t2h_source

        slo_latency = config.slo_latency
        if slo_latency is None:
            slo_latency = config.slo_multiplier * self.llm.mean_service
        self.slo_latency = slo_latency

        if config.mode == "vllm-only":
            return

        if config.mode in BASELINE_MODE_POLICY:
            entries = self._capacity_entries(train_log)
            self.baseline = BaselineCache(
                entries, BASELINE_MODE_POLICY[config.mode], seed=config.seed
            )
            self.capacity_entries = entries
            return

        # centroid modes need a clustered repository
        if train_log is None:
            train_log = generate_planted_corpus(
                config.n_clusters,
                config.per_cluster,
                config.intra_sim,
                dim=config.dim,
                seed=config.seed,
                zipf_s=config.corpus_zipf_s,
                user_pool=config.user_pool,
            )
            self.train_log = train_log
        self.initial_query_count = len(train_log)
        entries = self._capacity_entries(train_log)
        self.capacity_entries = entries
        sample_output = train_log[0].response if train_log and train_log[0].response else planted_response(0)
        self.capacity_bytes = entries * entry_cost_bytes(config.dim, sample_output)
        repo = build_repository(train_log, config.theta_c, config.min_community_size)
        self.cache = SemanticCacheState(
            self.capacity_bytes,
            overflow_enabled=config.overflow_enabled,
            decay=config.decay,
            batch_size=config.update_batch_size,
        )
        run_replacement(self.cache, repo)
        if config.lookup_backend == "hnsw":
            self._rebuild_index()
        self._build_table(built_at_epoch=self.cache.epoch)
        theta0 = config.theta_fixed
        self.controller = ControllerState(
            llm_service_mean=self.llm.mean_service,
            slo_latency=self.slo_latency,
            theta_r=theta0,
            window_seconds=config.window_seconds,
        )
        if self.dta and self.table is not None:
            # unloaded selection before any traffic is observed
            self.controller.theta_r = choose_theta(
                self.table, 0.0, self.llm.mean_service, self.slo_latency
            )

    # -- capacity ---------------------------------------------------------------

    def _capacity_entries(self, train_log) -> int:
        if self.config.capacity_entries is not None:
            return max(1, self.config.capacity_entries)
        base = len(train_log) if train_log else self.config.n_clusters * self.config.per_cluster
        return max(1, round(self.config.capacity_fraction * base))

    # -- retrieval ----------------------------------------------------------------

    def _rebuild_index(self) -> None:
        # The graph covers centroids; the small LRU overflow region is scanned
        # exactly on every lookup (its entries all sit at the rank floor anyway).
        entries = list(self.cache.centroids.values())
        self.index = build_index(
            entries,
            dim=self.config.dim,
            m=self.config.hnsw_m,
            ef_construction=self.config.ef_construction,
            ef_search=self.config.ef_search,
            level_mode="locality",
            seed=self.config.seed,
        )

    def current_theta(self) -> float:
        if self.mode in CENTROID_MODES and self.controller is not None:
            return self.controller.theta_r
        return self.config.theta_fixed

    def lookup(self, vec: Vector, theta: float):
        """Best cached entry above ``theta``: (kind, id, similarity, output) or None."""
        self.lookup_count += 1
        if self.baseline is not None:
            self.exact_computations += len(self.baseline)
            found = self.baseline.lookup(vec, theta)
            if found is None:
                return None
            eid, sim, output = found
            return ("baseline", eid, sim, output)
        if self.index is not None:
            res = self.index.search(vec, theta)
            best = None
            if res.is_hit:
                best = ("centroid", res.centroid_id, res.similarity, res.output)
            if self.cache.overflow:
                self.exact_computations += len(self.cache.overflow)
                over = self.cache.overflow_lookup(vec, theta)
                if over is not None and (best is None or over[2] > best[2]):
                    best = over
            return best
        self.exact_computations += len(self.cache.centroids) + len(self.cache.overflow)
        return self.cache.lookup(vec, theta)

    def probe(self, vec: Vector, theta: float) -> bool:
        """Non-mutating hit test used for T2H table construction."""
        if self.index is not None:
            if self.index.search(vec, theta).is_hit:
                return True
            return self.cache.overflow_lookup(vec, theta) is not None
        return self.cache.lookup(vec, theta) is not None

    def on_hit(self, kind: str, entry_id: str) -> None:
        if kind == "centroid":
            self.cache.record_hit(entry_id)
        elif kind == "overflow":
            self.cache.overflow_touch(entry_id)
        elif kind == "baseline":
            self.baseline.on_hit(entry_id)

    def insert_individual(self, entry_id: str, vec: Vector, output: str) -> None:
        """Cache a served miss as an individual vector, per the active mode."""
        if self.baseline is not None:
            self.baseline.insert(entry_id, vec, output)
            return
        if self.cache is None or not self.cache.overflow_enabled:
            return
        self.cache.overflow_insert(f"o:{entry_id}", vec, output)

    # -- repeated-query routing -----------------------------------------------------

    def check_repeat(self, user_id: str, vec: Vector, now: float) -> bool:
        hist = self._user_history.get(user_id)
        if hist is None:
            hist = deque(maxlen=self.config.repeat_history)
            self._user_history[user_id] = hist
        hit = detect_repeat(
            hist, vec, now, self.config.repeat_window, self.config.repeat_threshold
        )
        hist.append((now, vec))
        return hit

    # -- controller plumbing ----------------------------------------------------------

    def _build_table(self, built_at_epoch: int) -> None:
        source = self._t2h_source
        if source is None:
            source = PlantedQuerySampler(
                self.config.n_clusters,
                dim=self.config.dim,
                topic_seed=self.config.seed,
                seed=_subseed(self.config.seed, 3),
                zipf_s=self.config.stream_zipf_s,
                tiers=self.config.tiers,
                user_pool=self.config.user_pool,
            )
        pool = [q.embedding for q in source.take(self.config.t2h_pool)]
        self.table = build_t2h(
            self.probe,
            pool,
            sample_fraction=self.config.t2h_sample_fraction,
            grid=self.grid,
            seed=_subseed(self.config.seed, 4),
            built_at_epoch=built_at_epoch,
        )

    def note_llm_service(self, svc: float) -> None:
        self._service_sum += svc
        self._service_n += 1

    def measured_service_mean(self) -> float:
        if self._service_n == 0:
            return self.llm.mean_service
        return self._service_sum / self._service_n

    def recluster(self, new_log: list[QueryRecord]) -> None:
        """Re-cluster newly accumulated queries and fold them into the cache."""
        repo = build_repository(new_log, self.config.theta_c, self.config.min_community_size)
        # ids from incremental builds must not collide with live centroids
        for c in repo.centroids:
            c.id = f"e{self.cache.epoch}-{c.id}"
        run_replacement(self.cache, repo)
        if self.config.lookup_backend == "hnsw":
            self._rebuild_index()
        self._build_table(built_at_epoch=self.cache.epoch)

    def distance_stats(self) -> dict:
        total = self.exact_computations
        if self.index is not None:
            total += self.index.distance_computations
        mean = total / self.lookup_count if self.lookup_count else 0.0
        return {"total": total, "mean_per_lookup": mean, "lookups": self.lookup_count}


@dataclass
class SimReport:
    """Aggregated outcome of one simulated run."""

    mode: str
    seed: int
    arrivals: int
    hits: int
    misses: int
    rejections: int
    repeats_bypassed: int
    hit_ratio: float
    slo_attainment: float
    mean_e2e: float
    p50_e2e: float
    p99_e2e: float
    mean_llm_sojourn: float
    steady_hit_ratio: float
    steady_slo_attainment: float
    steady_after: float
    capacity_entries: int
    theta_trace: list[float]
    controller_trace: list[dict]
    distance_computations: dict

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "arrivals": self.arrivals,
            "hits": self.hits,
            "misses": self.misses,
            "rejections": self.rejections,
            "repeats_bypassed": self.repeats_bypassed,
            "hit_ratio": self.hit_ratio,
            "slo_attainment": self.slo_attainment,
            "mean_e2e": self.mean_e2e,
            "p50_e2e": self.p50_e2e,
            "p99_e2e": self.p99_e2e,
            "mean_llm_sojourn": self.mean_llm_sojourn,
            "steady_hit_ratio": self.steady_hit_ratio,
            "steady_slo_attainment": self.steady_slo_attainment,
            "steady_after": self.steady_after,
            "capacity_entries": self.capacity_entries,
            "theta_trace": self.theta_trace,
            "controller_trace": self.controller_trace,
            "distance_computations": self.distance_computations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def run_simulation(
    workload: WorkloadSpec,
    config: SimConfig,
    source=None,
    system: ServingSystem | None = None,
    keep_records: bool = False,
    arrivals: np.ndarray | None = None,
):
    """Event-driven execution of the full arrival stream; deterministic under seed.

    ``source`` supplies the query stream (default: a planted sampler aligned
    with the system's training corpus). ``arrivals`` overrides the generated
    arrival times, e.g. for ramped multi-phase loads; they must lie within
    ``workload.duration``. Returns a SimReport, or ``(SimReport, records)``
    when ``keep_records`` is set.
    """
    if system is None:
        system = ServingSystem(config)
    mode = config.mode
    if arrivals is None:
        arrivals = generate_arrivals(workload)
    if source is None:
        source = PlantedQuerySampler(
            config.n_clusters,
            dim=config.dim,
            topic_seed=config.seed,
            seed=_subseed(workload.seed, 1),
            zipf_s=config.stream_zipf_s,
            tiers=config.tiers,
            user_pool=config.user_pool,
        )
    queries = source.take(len(arrivals))

    heap: list[tuple] = []
    seq = 0
    for t, q in zip(arrivals, queries):
        heap.append((float(t), 1, seq, "arrival", q))
        seq += 1
    is_centroid = mode in CENTROID_MODES
    if is_centroid:
        w = config.window_seconds
        k = 1
        while k * w <= workload.duration:
            heap.append((k * w, 2, seq, "tick", k))
            seq += 1
            k += 1
    heapq.heapify(heap)

    server_free = [0.0] * config.servers
    heapq.heapify(server_free)
    pending_starts: list[float] = []

    records: list[RequestRecord] = []
    hits = misses = rejections = repeats = 0
    window_arrivals = 0
    window_sojourns: list[float] = []
    window_slo = [0, 0]
    trace: list[dict] = []
    theta_trace: list[float] = []
    recluster_log: list[QueryRecord] = []
    cache_latency = config.embed_latency + config.search_hit_latency
    miss_latency = config.embed_latency + config.search_miss_latency

    def account_completion(rec: RequestRecord) -> None:
        nonlocal window_slo
        window_sojourns.append(rec.backend_sojourn)
        window_slo[0] += 1 if rec.slo_ok else 0
        window_slo[1] += 1

    def submit_llm(q: QueryRecord, arrival_t: float, ready_t: float, theta: float,
                   pre_latency: float, repeat: bool) -> None:
        nonlocal seq, rejections
        if config.queue_bound is not None:
            cut = bisect_right(pending_starts, ready_t)
            del pending_starts[:cut]
            if len(pending_starts) >= config.queue_bound:
                rejections += 1
                rec = RequestRecord(
                    query_id=q.id, arrival_t=arrival_t, dequeue_t=arrival_t,
                    completion_t=arrival_t, served_by="rejected", e2e_latency=0.0,
                    unloaded_e2e=0.0, slo_ok=False, theta_at_service=theta,
                    repeat_bypass=repeat, cluster_label=q.cluster_label,
                )
                records.append(rec)
                account_completion(rec)
                return
        n_tokens = system.tokens.draw()
        svc = mock_llm_service_time(system.llm, n_tokens)
        earliest = heapq.heappop(server_free)
        start = max(ready_t, earliest)
        heapq.heappush(server_free, start + svc)
        insort(pending_starts, start)
        completion = start + svc
        rec = RequestRecord(
            query_id=q.id, arrival_t=arrival_t, dequeue_t=start, completion_t=completion,
            served_by="llm", e2e_latency=completion - arrival_t,
            unloaded_e2e=pre_latency + svc,
            slo_ok=(completion - arrival_t) <= system.slo.bound(pre_latency + svc),
            theta_at_service=theta, n_tokens=n_tokens, repeat_bypass=repeat,
            cluster_label=q.cluster_label, backend_sojourn=completion - ready_t,
        )
        heapq.heappush(heap, (completion, 0, seq, "llm_done", (rec, q)))
        seq += 1

    while heap:
        t, _prio, _seq, kind, payload = heapq.heappop(heap)

        if kind == "llm_done":
            rec, q = payload
            records.append(rec)
            account_completion(rec)
            system.note_llm_service(rec.completion_t - rec.dequeue_t)
            if mode != "vllm-only" and rec.served_by == "llm":
                response = q.response if q.response is not None else f"generated:{q.id}"
                system.insert_individual(q.id, q.embedding, response)
                if config.recluster_enabled and is_centroid and not rec.repeat_bypass:
                    recluster_log.append(replace(q, response=response))
            continue

        if kind == "arrival":
            q = payload
            window_arrivals += 1
            theta = system.current_theta()
            if mode == "vllm-only":
                misses += 1
                submit_llm(q, t, t, theta, 0.0, repeat=False)
                continue
            if (
                is_centroid
                and config.repeat_detection
                and system.check_repeat(q.user_id, q.embedding, t)
            ):
                repeats += 1
                misses += 1
                submit_llm(q, t, t + config.embed_latency, theta,
                           config.embed_latency, repeat=True)
                continue
            found = system.lookup(q.embedding, theta)
            if found is not None:
                hits += 1
                kind_, eid, sim, output = found
                system.on_hit(kind_, eid)
                completion = t + cache_latency
                rec = RequestRecord(
                    query_id=q.id, arrival_t=t, dequeue_t=t, completion_t=completion,
                    served_by="cache", e2e_latency=cache_latency,
                    unloaded_e2e=cache_latency, slo_ok=True, theta_at_service=theta,
                    cluster_label=q.cluster_label,
                )
                records.append(rec)
                account_completion(rec)
            else:
                misses += 1
                submit_llm(q, t, t + miss_latency, theta, miss_latency, repeat=False)
            continue

        # controller tick
        cstate = system.controller
        lam = update_lambda(cstate, window_arrivals)
        measured_l = system.measured_service_mean()
        cstate.llm_service_mean = measured_l
        w_actual = (sum(window_sojourns) / len(window_sojourns)) if window_sojourns else None
        if system.dta and system.table is not None:
            cstate.theta_r = choose_theta(system.table, lam, measured_l, system.slo_latency)
            # The 10% correction only matters when waits are a real fraction of
            # the objective; far below it there is nothing to fix and window
            # noise would just jitter the threshold.
            significant = (
                w_actual is not None
                and cstate.last_w_estimate is not None
                and max(w_actual, cstate.last_w_estimate) >= 0.5 * system.slo_latency
            )
            if significant:
                feedback_adjust(
                    cstate, w_actual,
                    step=system.grid[0] - system.grid[1] if len(system.grid) > 1 else 0.02,
                    floor=system.grid[-1], ceiling=system.grid[0],
                )
        h_used = system.table.hit_ratio_at(cstate.theta_r) if system.table else 0.0
        w_est = estimate_wait(lam, measured_l, h_used)
        cstate.last_w_estimate = w_est
        slo_frac = window_slo[0] / window_slo[1] if window_slo[1] else 1.0
        trace.append(
            {
                "tick": payload,
                "lambda_hat": lam,
                "L": measured_l,
                "h_used": h_used,
                "theta_r": cstate.theta_r,
                "W_est": w_est if w_est != float("inf") else "inf",
                "W_actual": w_actual if w_actual is not None else "",
                "slo_ok_fraction": slo_frac,
            }
        )
        theta_trace.append(cstate.theta_r)
        window_arrivals = 0
        window_sojourns = []
        window_slo = [0, 0]
        if config.recluster_enabled and is_centroid and recluster_log and should_recluster(
            len(recluster_log), system.initial_query_count, config.recluster_fraction
        ):
            system.recluster(list(recluster_log))
            recluster_log.clear()

    total = len(records)
    e2e = np.array([r.e2e_latency for r in records]) if records else np.array([0.0])
    llm_sojourns = [r.e2e_latency for r in records if r.served_by == "llm"]
    steady = [r for r in records if r.arrival_t >= config.steady_after]
    steady_hits = sum(1 for r in steady if r.served_by == "cache")
    report = SimReport(
        mode=mode,
        seed=workload.seed,
        arrivals=total,
        hits=hits,
        misses=misses,
        rejections=rejections,
        repeats_bypassed=repeats,
        hit_ratio=hits / total if total else 0.0,
        slo_attainment=sum(1 for r in records if r.slo_ok) / total if total else 0.0,
        mean_e2e=float(np.mean(e2e)),
        p50_e2e=float(np.percentile(e2e, 50)),
        p99_e2e=float(np.percentile(e2e, 99)),
        mean_llm_sojourn=float(np.mean(llm_sojourns)) if llm_sojourns else 0.0,
        steady_hit_ratio=steady_hits / len(steady) if steady else 0.0,
        steady_slo_attainment=(
            sum(1 for r in steady if r.slo_ok) / len(steady) if steady else 0.0
        ),
        steady_after=config.steady_after,
        capacity_entries=system.capacity_entries,
        theta_trace=theta_trace,
        controller_trace=trace,
        distance_computations=system.distance_stats(),
    )
    if keep_records:
        return report, records
    return report


# ---------------------------------------------------------------------------
# Experiment sweeps
# ---------------------------------------------------------------------------

SWEEP_KINDS = ("rps", "cv", "capacity", "policy")

_CSV_COLUMNS = [
    "sweep", "value", "mode", "seed", "hit_ratio", "slo_attainment",
    "steady_hit_ratio", "steady_slo_attainment", "mean_e2e", "p50_e2e", "p99_e2e",
    "arrivals", "hits", "misses", "rejections", "capacity_entries",
]


def _row(sweep: str, value, report: SimReport) -> dict:
    return {
        "sweep": sweep,
        "value": value,
        "mode": report.mode,
        "seed": report.seed,
        "hit_ratio": report.hit_ratio,
        "slo_attainment": report.slo_attainment,
        "steady_hit_ratio": report.steady_hit_ratio,
        "steady_slo_attainment": report.steady_slo_attainment,
        "mean_e2e": report.mean_e2e,
        "p50_e2e": report.p50_e2e,
        "p99_e2e": report.p99_e2e,
        "arrivals": report.arrivals,
        "hits": report.hits,
        "misses": report.misses,
        "rejections": report.rejections,
        "capacity_entries": report.capacity_entries,
    }


def experiment_sweeps(
    workload: WorkloadSpec,
    config: SimConfig,
    sweep: str,
    values: Sequence,
    modes: Sequence[str] | None = None,
) -> list[dict]:
    """One simulation per sweep point per mode, with a shared seed discipline.

    Returns tidy rows (one observation per row) ready for CSV export.
    """
    if sweep not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep {sweep!r}; expected one of {SWEEP_KINDS}")
    rows: list[dict] = []
    if sweep == "policy":
        sweep_modes = list(values) if values else list(MODES)
        for mode in sweep_modes:
            report = run_simulation(workload, replace(config, mode=mode))
            rows.append(_row("policy", mode, report))
        return rows
    run_modes = list(modes) if modes else [config.mode]
    for value in values:
        for mode in run_modes:
            wl = workload
            cfg = replace(config, mode=mode)
            if sweep == "rps":
                wl = replace(workload, rps=float(value))
            elif sweep == "cv":
                wl = replace(workload, cv=float(value))
            else:
                cfg = replace(cfg, capacity_fraction=float(value))
            report = run_simulation(wl, cfg)
            rows.append(_row(sweep, value, report))
    return rows


def write_rows_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_trace_csv(report: SimReport, path: str) -> None:
    columns = ["tick", "lambda_hat", "L", "h_used", "theta_r", "W_est", "W_actual",
               "slo_ok_fraction"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in report.controller_trace:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Live mode: wall-clock pipeline against a real HTTP generation backend
# ---------------------------------------------------------------------------


class HttpGenerateBackend:
    """Adapter for a generation endpoint: POST /generate {text} -> {text, n_tokens}."""

    def __init__(self, base_url: str, timeout: float = 30.0, retries: int = 2,
                 backoff: float = 0.5):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def generate(self, text: str) -> tuple[str, int]:
        import requests

        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = requests.post(
                    f"{self.base_url}/generate", json={"text": text}, timeout=self.timeout
                )
                resp.raise_for_status()
                data = resp.json()
                return str(data["text"]), int(data["n_tokens"])
            except Exception as exc:  # noqa: BLE001 - adapter boundary
                last_error = exc
                if attempt < self.retries:
                    _time.sleep(self.backoff * (2**attempt))
        raise RuntimeError(f"generation backend failed after {self.retries + 1} attempts: {last_error}")


class LivePipeline:
    """Foreground wall-clock version of the serving pipeline.

    Lookups and cache mutations share one lock, so concurrent handlers always
    observe a consistent cache. The retrieval threshold is read once per
    request.
    """

    def __init__(self, system: ServingSystem, backend: HttpGenerateBackend,
                 embed_fn: Callable[[str], Vector]):
        self.system = system
        self.backend = backend
        self.embed_fn = embed_fn
        self._lock = threading.Lock()

    def serve_query(self, query: QueryRecord) -> RequestRecord:
        arrival = _time.monotonic()
        vec = query.embedding if query.embedding is not None else self.embed_fn(query.text)
        theta = self.system.current_theta()
        with self._lock:
            repeat = (
                self.system.config.repeat_detection
                and self.system.check_repeat(query.user_id, vec, arrival)
            )
            found = None if repeat else self.system.lookup(vec, theta)
            if found is not None:
                self.system.on_hit(found[0], found[1])
        if found is not None:
            done = _time.monotonic()
            return RequestRecord(
                query_id=query.id, arrival_t=arrival, dequeue_t=arrival, completion_t=done,
                served_by="cache", e2e_latency=done - arrival, unloaded_e2e=done - arrival,
                slo_ok=True, theta_at_service=theta, repeat_bypass=False,
            )
        text, n_tokens = self.backend.generate(query.text)
        with self._lock:
            self.system.insert_individual(query.id, vec, text)
        done = _time.monotonic()
        return RequestRecord(
            query_id=query.id, arrival_t=arrival, dequeue_t=arrival, completion_t=done,
            served_by="llm", e2e_latency=done - arrival, unloaded_e2e=done - arrival,
            slo_ok=True, theta_at_service=theta, n_tokens=n_tokens, repeat_bypass=repeat,
        )

    def run(self, queries: Iterable[QueryRecord], concurrency: int = 1) -> list[RequestRecord]:
        if concurrency <= 1:
            return [self.serve_query(q) for q in queries]
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            return list(pool.map(self.serve_query, queries))
