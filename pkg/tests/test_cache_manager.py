import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcache.cache import (
    BaselineCache,
    SemanticCacheState,
    baseline_step,
    centroid_cost_bytes,
    entry_cost_bytes,
    filter_centroids,
    merge_centroids,
    run_replacement,
)
from semcache.clustering import INFINITE_ACCESS, Centroid, CentroidRepository
from semcache.core import normalize, synthetic_embed

DIM = 32


def make_centroid(cid, vec=None, size=1.0, count=0.0, output="out"):
    if vec is None:
        vec = synthetic_embed(cid, DIM, 0)
    return Centroid(id=cid, vector=vec, output=output, cluster_size=float(size),
                    access_count=count)


def capacity_for(n_entries, output="out"):
    return n_entries * entry_cost_bytes(DIM, output)


# ---------------------------------------------------------------------------
# Reference implementations (deliberately naive; the oracles for randomized
# equivalence checks)
# ---------------------------------------------------------------------------


def ref_merge(c_cur, c_repo, theta_c):
    merged = [c.copy() for c in c_cur]
    for rc in c_repo:
        best, best_sim = None, -2.0
        for i, c in enumerate(merged):
            sim = float(np.dot(c.vector.astype(np.float64), rc.vector.astype(np.float64)))
            if sim > best_sim or (sim == best_sim and c.id < merged[best].id):
                best, best_sim = i, sim
        if best is not None and best_sim > theta_c:
            merged[best].cluster_size += rc.cluster_size
        else:
            added = rc.copy()
            added.access_count = INFINITE_ACCESS
            merged.append(added)
    return merged


def ref_filter(c_new, capacity_bytes, decay=1.1):
    # re-sorts on every round, exactly as the stepwise description reads
    working = [c.copy() for c in c_new]
    while working and sum(centroid_cost_bytes(c) for c in working) > capacity_bytes:
        working.sort(key=lambda c: (c.cluster_size, c.access_count, c.id))
        working.pop(0)
    for c in working:
        c.cluster_size /= decay
        c.access_count = 0.0
    return working


class TestMergeCentroids:
    def test_similar_repo_centroid_merges_mass(self):
        base = synthetic_embed("topic", DIM, 1)
        near = normalize(base + 0.15 * synthetic_embed("nudge", DIM, 2))
        assert float(base @ near) > 0.86
        cur = [make_centroid("cache-0", base, size=10)]
        repo = [make_centroid("repo-0", near, size=5)]
        merged = merge_centroids(cur, repo, 0.86)
        assert len(merged) == 1
        assert merged[0].cluster_size == 15
        assert merged[0].id == "cache-0"

    def test_dissimilar_repo_centroid_appended_with_sentinel(self):
        cur = [make_centroid("cache-0", normalize([1.0] + [0.0] * (DIM - 1)), size=10)]
        far = normalize([0.0, 1.0] + [0.0] * (DIM - 2))
        merged = merge_centroids(cur, [make_centroid("repo-0", far, size=5)], 0.86)
        assert len(merged) == 2
        assert merged[1].id == "repo-0"
        assert merged[1].access_count == INFINITE_ACCESS

    def test_empty_cache_bootstrap(self):
        repo = [make_centroid(f"repo-{i}", size=i + 1) for i in range(4)]
        merged = merge_centroids([], repo, 0.86)
        assert [c.id for c in merged] == [c.id for c in repo]
        assert all(c.access_count == INFINITE_ACCESS for c in merged)

    def test_inputs_not_mutated(self):
        cur = [make_centroid("a", size=3)]
        repo = [make_centroid("b", cur[0].vector.copy(), size=2)]
        merge_centroids(cur, repo, 0.5)
        assert cur[0].cluster_size == 3
        assert repo[0].access_count == 0.0

    @settings(max_examples=40, deadline=None)
    @given(
        n_cur=st.integers(min_value=0, max_value=8),
        n_repo=st.integers(min_value=0, max_value=8),
        seed=st.integers(min_value=0, max_value=50),
    )
    def test_merge_conservation_exact(self, n_cur, n_repo, seed):
        rng = np.random.default_rng(seed)
        cur = [make_centroid(f"c{i}", normalize(rng.standard_normal(DIM)),
                             size=int(rng.integers(1, 100))) for i in range(n_cur)]
        repo = [make_centroid(f"r{i}", normalize(rng.standard_normal(DIM)),
                              size=int(rng.integers(1, 100))) for i in range(n_repo)]
        merged = merge_centroids(cur, repo, 0.86)
        total_before = sum(c.cluster_size for c in cur) + sum(c.cluster_size for c in repo)
        assert sum(c.cluster_size for c in merged) == total_before


class TestFilterCentroids:
    def test_decay_divides_by_1_1(self):
        kept = filter_centroids([make_centroid("a", size=110)], capacity_for(5))
        assert kept[0].cluster_size == pytest.approx(100.0)

    def test_smaller_cluster_evicted_first(self):
        cents = [make_centroid("a", size=3), make_centroid("b", size=7)]
        kept = filter_centroids(cents, capacity_for(1))
        assert [c.id for c in kept] == ["b"]

    def test_access_count_breaks_ties_and_sentinel_protected(self):
        cents = [
            make_centroid("a", size=5, count=2),
            make_centroid("b", size=5, count=INFINITE_ACCESS),
        ]
        kept = filter_centroids(cents, capacity_for(1))
        assert [c.id for c in kept] == ["b"]

    def test_counts_reset_to_zero(self):
        cents = [make_centroid("a", size=5, count=9), make_centroid("b", size=6, count=INFINITE_ACCESS)]
        kept = filter_centroids(cents, capacity_for(2))
        assert all(c.access_count == 0.0 for c in kept)

    def test_capacity_too_small_returns_empty_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            kept = filter_centroids([make_centroid("a", size=5)], 8)
        assert kept == []
        assert "capacity" in caplog.text

    def test_id_is_final_tie_break(self):
        cents = [make_centroid("b", size=5, count=1), make_centroid("a", size=5, count=1)]
        kept = filter_centroids(cents, capacity_for(1))
        assert [c.id for c in kept] == ["b"]

    @settings(max_examples=40, deadline=None)
    @given(
        sizes=st.lists(st.integers(min_value=1, max_value=50), min_size=1, max_size=12),
        keep=st.integers(min_value=1, max_value=12),
    )
    def test_filter_monotonicity(self, sizes, keep):
        # with equal finite counts, a strictly larger cluster never dies
        # while a smaller one survives
        cents = [make_centroid(f"c{i}", size=s) for i, s in enumerate(sizes)]
        kept = filter_centroids(cents, capacity_for(min(keep, len(sizes))))
        kept_sizes = {c.id: c.cluster_size * 1.1 for c in kept}
        evicted = [c for c in cents if c.id not in kept_sizes]
        if kept and evicted:
            assert max(c.cluster_size for c in evicted) <= min(kept_sizes.values()) + 1e-9


class TestUpdateCentroids:
    def _cache(self, entries=8):
        return SemanticCacheState(capacity_for(entries))

    def test_single_step_swap(self):
        cache = self._cache()
        old = [make_centroid("a"), make_centroid("b")]
        cache.update_centroids(old)
        new = [make_centroid("b"), make_centroid("c")]
        epoch = cache.update_centroids(new, batch_size=100)
        assert epoch == 2
        assert sorted(cache.centroids) == ["b", "c"]

    def test_noop_update_still_bumps_epoch(self):
        cache = self._cache()
        cents = [make_centroid("a")]
        cache.update_centroids(cents)
        before = {k: v for k, v in cache.centroids.items()}
        epoch = cache.update_centroids([c.copy() for c in cents])
        assert epoch == 2
        assert cache.centroids["a"] is before["a"]

    def test_concurrent_update_rejected(self):
        cache = self._cache()
        cache.update_centroids([make_centroid("a")])

        def reenter(c):
            with pytest.raises(RuntimeError, match="in flight"):
                c.update_centroids([make_centroid("z")])

        cache.update_centroids([make_centroid("b")], batch_size=1, on_batch=reenter)

    def test_interleaved_lookups_see_consistent_mixed_sets(self):
        rng = np.random.default_rng(0)
        old = [make_centroid(f"old-{i}", normalize(rng.standard_normal(DIM)), size=i + 1)
               for i in range(10)]
        new = [make_centroid(f"new-{i}", normalize(rng.standard_normal(DIM)), size=i + 1)
               for i in range(10)]
        new.append(old[3].copy())  # one survivor
        cache = SemanticCacheState(capacity_for(64))
        cache.update_centroids(old)
        legal = {c.id for c in old} | {c.id for c in new}
        by_id = {c.id: c for c in old} | {c.id: c for c in new}
        probes = [normalize(rng.standard_normal(DIM)) for _ in range(6)]
        observations = []

        def check(c):
            for p in probes:
                found = c.lookup(p, -1.0)
                assert found is not None
                kind, cid, sim, output = found
                assert cid in legal
                assert output == by_id[cid].output
                observations.append(cid)

        cache.update_centroids(new, batch_size=2, on_batch=check)
        assert sorted(cache.centroids) == sorted({c.id for c in new})
        assert observations

    def test_duplicate_ids_rejected(self):
        cache = self._cache()
        with pytest.raises(ValueError, match="duplicate"):
            cache.update_centroids([make_centroid("a"), make_centroid("a")])


class TestRecordHit:
    def test_increments(self):
        cache = SemanticCacheState(capacity_for(4))
        cache.update_centroids([make_centroid("a")])
        for _ in range(3):
            cache.record_hit("a")
        assert cache.centroids["a"].access_count == 3

    def test_sentinel_absorbs(self):
        cache = SemanticCacheState(capacity_for(4))
        c = make_centroid("a", count=INFINITE_ACCESS)
        cache.update_centroids([c])
        cache.record_hit("a")
        assert cache.centroids["a"].access_count == INFINITE_ACCESS

    def test_unknown_id_errors(self):
        cache = SemanticCacheState(capacity_for(4))
        with pytest.raises(KeyError):
            cache.record_hit("ghost")

    def test_reset_after_filter(self):
        c = make_centroid("a", size=5, count=7)
        kept = filter_centroids([c], capacity_for(4))
        assert kept[0].access_count == 0.0


class TestRunReplacement:
    def _repo(self, centroids, dim=DIM):
        return CentroidRepository(centroids, 0.86, int(sum(c.cluster_size for c in centroids)),
                                  0.0, dim)

    def test_empty_cache_takes_repo_with_decay_and_reset(self):
        rng = np.random.default_rng(1)
        repo_cents = [make_centroid(f"r{i}", normalize(rng.standard_normal(DIM)), size=10 * (i + 1))
                      for i in range(4)]
        cache = SemanticCacheState(capacity_for(10))
        run_replacement(cache, self._repo(repo_cents))
        assert sorted(cache.centroids) == [f"r{i}" for i in range(4)]
        for i in range(4):
            assert cache.centroids[f"r{i}"].cluster_size == pytest.approx(10 * (i + 1) / 1.1)
            assert cache.centroids[f"r{i}"].access_count == 0.0

    def test_identical_repo_doubles_then_decays(self):
        base = make_centroid("a", size=10)
        cache = SemanticCacheState(capacity_for(4))
        cache.update_centroids([base])
        repo_twin = make_centroid("a-twin", base.vector.copy(), size=10)
        run_replacement(cache, self._repo([repo_twin]))
        assert list(cache.centroids) == ["a"]
        assert cache.centroids["a"].cluster_size == pytest.approx(20 / 1.1)

    def test_over_capacity_keeps_top_k_by_descending_key(self):
        rng = np.random.default_rng(2)
        repo_cents = [make_centroid(f"r{i}", normalize(rng.standard_normal(DIM)),
                                    size=int(rng.integers(1, 40))) for i in range(12)]
        cache = SemanticCacheState(capacity_for(5), overflow_enabled=False)
        run_replacement(cache, self._repo(repo_cents))
        expected = sorted(repo_cents, key=lambda c: (-c.cluster_size, -c.access_count, c.id))[:5]
        assert sorted(cache.centroids) == sorted(c.id for c in expected)
        assert cache.used_bytes <= cache.capacity_bytes

    def test_dimension_mismatch_rejected(self):
        cache = SemanticCacheState(capacity_for(4))
        cache.update_centroids([make_centroid("a")])
        other = Centroid(id="r", vector=synthetic_embed("r", 16, 0), output="o", cluster_size=1.0)
        with pytest.raises(ValueError, match="dimension"):
            run_replacement(cache, CentroidRepository([other], 0.86, 1, 0.0, 16))

    def test_replacement_event_logged(self):
        cache = SemanticCacheState(capacity_for(4))
        events = []
        run_replacement(cache, self._repo([make_centroid("a")]), log_sink=events.append)
        assert len(events) == 1
        for key in ("epoch", "merged", "appended", "evicted", "bytes_before", "bytes_after",
                    "duration_ms"):
            assert key in events[0]

    def test_decay_convergence_over_rounds(self):
        cache = SemanticCacheState(capacity_for(4))
        cache.update_centroids([make_centroid("a", size=100)])
        empty = self._repo([])
        for _ in range(5):
            run_replacement(cache, empty)
        assert cache.centroids["a"].cluster_size == pytest.approx(100 / 1.1**5)


class TestAlgorithmEquivalenceRandomized:
    """Module behavior matches the naive references on randomized cases."""

    def test_merge_matches_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n_cur, n_repo = rng.integers(0, 10), rng.integers(0, 10)
            cur = [make_centroid(f"c{i}", normalize(rng.standard_normal(DIM)),
                                 size=int(rng.integers(1, 50))) for i in range(n_cur)]
            repo = [make_centroid(f"r{i}", normalize(rng.standard_normal(DIM)),
                                  size=int(rng.integers(1, 50))) for i in range(n_repo)]
            theta = float(rng.uniform(0.2, 0.95))
            got = merge_centroids(cur, repo, theta)
            want = ref_merge(cur, repo, theta)
            assert [(c.id, c.cluster_size, c.access_count) for c in got] == [
                (c.id, c.cluster_size, c.access_count) for c in want
            ]

    def test_filter_matches_reference(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            n = int(rng.integers(0, 12))
            cents = []
            for i in range(n):
                count = INFINITE_ACCESS if rng.random() < 0.2 else float(rng.integers(0, 5))
                cents.append(make_centroid(f"c{i}", normalize(rng.standard_normal(DIM)),
                                           size=int(rng.integers(1, 30)), count=count))
            capacity = capacity_for(int(rng.integers(1, 13)))
            got = filter_centroids(cents, capacity)
            want = ref_filter(cents, capacity)
            assert [(c.id, c.cluster_size, c.access_count) for c in got] == [
                (c.id, c.cluster_size, c.access_count) for c in want
            ]


class TestOverflowRegion:
    def test_individual_vectors_fill_leftover_capacity(self):
        cache = SemanticCacheState(capacity_for(3))
        cache.update_centroids([make_centroid("a")])
        assert cache.overflow_insert("o1", synthetic_embed("o1", DIM, 0), "out")
        assert cache.overflow_insert("o2", synthetic_embed("o2", DIM, 0), "out")
        assert not cache.overflow_insert("o3", synthetic_embed("o3", DIM, 0), "out") or \
            len(cache.overflow) <= 2
        assert cache.used_bytes <= cache.capacity_bytes

    def test_lru_eviction_order(self):
        cache = SemanticCacheState(capacity_for(2))
        cache.overflow_insert("o1", synthetic_embed("o1", DIM, 0), "out")
        cache.overflow_insert("o2", synthetic_embed("o2", DIM, 0), "out")
        cache.overflow_touch("o1")
        cache.overflow_insert("o3", synthetic_embed("o3", DIM, 0), "out")
        assert sorted(cache.overflow) == ["o1", "o3"]

    def test_disabled_overflow_refuses(self):
        cache = SemanticCacheState(capacity_for(2), overflow_enabled=False)
        assert cache.overflow_insert("o1", synthetic_embed("o1", DIM, 0), "out") is False

    def test_overflow_trimmed_when_centroids_grow(self):
        cache = SemanticCacheState(capacity_for(2))
        cache.overflow_insert("o1", synthetic_embed("o1", DIM, 0), "out")
        cache.overflow_insert("o2", synthetic_embed("o2", DIM, 0), "out")
        cache.update_centroids([make_centroid("a"), make_centroid("b")])
        assert len(cache.overflow) == 0
        assert cache.used_bytes <= cache.capacity_bytes


# ---------------------------------------------------------------------------
# Baseline policies
# ---------------------------------------------------------------------------


def _vec(name):
    return synthetic_embed(name, DIM, 7)


class TestBaselineTextbookCases:
    def test_lru(self):
        cache = BaselineCache(2, "lru")
        cache.insert("A", _vec("A"), "a")
        cache.insert("B", _vec("B"), "b")
        cache.on_hit("A")
        evicted = cache.insert("C", _vec("C"), "c")
        assert evicted == "B"

    def test_lfu(self):
        cache = BaselineCache(2, "lfu")
        cache.insert("A", _vec("A"), "a")
        cache.insert("B", _vec("B"), "b")
        for _ in range(3):
            cache.on_hit("A")
        evicted = cache.insert("C", _vec("C"), "c")
        assert evicted == "B"

    def test_fifo(self):
        cache = BaselineCache(2, "fifo")
        cache.insert("A", _vec("A"), "a")
        cache.insert("B", _vec("B"), "b")
        cache.on_hit("A")
        evicted = cache.insert("C", _vec("C"), "c")
        assert evicted == "A"

    def test_rr_rotates(self):
        cache = BaselineCache(2, "rr", seed=0)
        cache.insert("A", _vec("A"), "a")
        cache.insert("B", _vec("B"), "b")
        assert cache.insert("C", _vec("C"), "c") == "A"
        assert cache.insert("D", _vec("D"), "d") == "B"
        assert cache.insert("E", _vec("E"), "e") == "C"

    def test_unknown_policy(self):
        with pytest.raises(ValueError, match="policy"):
            BaselineCache(2, "mru")

    def test_step_hit_and_miss(self):
        cache = BaselineCache(2, "lru")
        first = baseline_step(cache, "A", _vec("A"), 0.9, "a")
        assert not first.hit
        again = baseline_step(cache, "A2", _vec("A"), 0.9, "a")
        assert again.hit and again.entry_id == "A"


class TestBaselineReferenceEquivalence:
    """Eviction sequences match compact reference policies on random traces."""

    def _reference_trace(self, policy, events, capacity):
        entries = {}
        seq = 0
        cursor = 0
        slots = [None] * capacity
        evictions = []
        for kind, key in events:
            seq += 1
            if kind == "hit":
                freq, _, islot, ins = entries[key]
                entries[key] = (freq + 1, seq, islot, ins)
            else:
                victim = None
                if len(entries) >= capacity:
                    if policy == "lru":
                        victim = min(entries, key=lambda k: entries[k][1])
                    elif policy == "lfu":
                        victim = min(entries, key=lambda k: (entries[k][0], entries[k][1]))
                    elif policy == "fifo":
                        victim = min(entries, key=lambda k: entries[k][3])
                    else:
                        while True:
                            cand = slots[cursor]
                            cursor = (cursor + 1) % capacity
                            if cand in entries:
                                victim = cand
                                break
                    slots[entries[victim][2]] = None
                    del entries[victim]
                    evictions.append(victim)
                slot = slots.index(None)
                entries[key] = (1, seq, slot, seq)
                slots[slot] = key
        return evictions

    @pytest.mark.parametrize("policy", ["lru", "lfu", "fifo", "rr"])
    def test_eviction_sequence_matches(self, policy):
        rng = np.random.default_rng(11)
        capacity = 16
        cache = BaselineCache(capacity, policy, seed=0)
        live = []
        events = []
        evictions = []
        for i in range(10_000):
            if live and rng.random() < 0.6:
                key = live[int(rng.integers(0, len(live)))]
                events.append(("hit", key))
                cache.on_hit(key)
            else:
                key = f"k{i}"
                events.append(("miss", key))
                gone = cache.insert(key, _vec(key[:8]), "o")
                if gone is not None:
                    evictions.append(gone)
                    live.remove(gone)
                live.append(key)
        assert evictions == self._reference_trace(policy, events, capacity)
