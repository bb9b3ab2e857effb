import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcache.core import (
    QueryRecord,
    cosine_similarity,
    dump_query_log,
    generate_planted_corpus,
    load_query_log,
    noise_sigma,
    normalize,
    synthetic_embed,
    zipf_counts,
)

finite_floats = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)
small_vectors = st.lists(finite_floats, min_size=2, max_size=16)


def nonzero(values):
    return any(abs(v) > 1e-6 for v in values)


class TestCosineSimilarity:
    def test_self_similarity_is_one(self):
        v = synthetic_embed("anything", 64, 0)
        assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_basis(self):
        e1 = np.array([1.0, 0.0, 0.0], dtype=np.float32)
        e2 = np.array([0.0, 1.0, 0.0], dtype=np.float32)
        assert cosine_similarity(e1, e2) == 0.0

    def test_antipodal(self):
        u = normalize([0.3, -0.4, 1.2])
        assert cosine_similarity(u, -u) == pytest.approx(-1.0, abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(a=small_vectors, b=small_vectors)
    def test_symmetry_exact(self, a, b):
        if len(a) != len(b) or not nonzero(a) or not nonzero(b):
            return
        assert cosine_similarity(a, b) == cosine_similarity(b, a)

    @settings(max_examples=100, deadline=None)
    @given(a=small_vectors, b=small_vectors, scale=st.floats(min_value=0.01, max_value=100))
    def test_normalization_invariance(self, a, b, scale):
        if len(a) != len(b) or not nonzero(a) or not nonzero(b):
            return
        direct = cosine_similarity(a, b)
        scaled = cosine_similarity([x * scale for x in a], b)
        normed = cosine_similarity(normalize(a), normalize(b))
        assert scaled == pytest.approx(direct, abs=1e-5)
        assert normed == pytest.approx(direct, abs=1e-6)


class TestNormalize:
    def test_three_four_five(self):
        v = normalize([3.0, 4.0])
        assert v == pytest.approx([0.6, 0.8], abs=1e-6)

    def test_idempotent(self):
        v = normalize([1.0, 2.0, 3.0])
        again = normalize(v)
        assert np.allclose(v, again, atol=1e-7)

    def test_zero_vector(self):
        with pytest.raises(ValueError, match="zero"):
            normalize([0.0, 0.0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            normalize([float("nan"), 1.0])


class TestSyntheticEmbed:
    def test_deterministic(self):
        a = synthetic_embed("hello world", 768, 3)
        b = synthetic_embed("hello world", 768, 3)
        assert np.array_equal(a, b)

    def test_seed_changes_vector(self):
        a = synthetic_embed("hello world", 64, 3)
        b = synthetic_embed("hello world", 64, 4)
        assert not np.array_equal(a, b)

    def test_unit_norm(self):
        v = synthetic_embed("q", 768, 0)
        assert float(np.linalg.norm(v)) == pytest.approx(1.0, abs=1e-6)

    def test_distinct_texts_near_orthogonal(self):
        # 1000 random pairs at full dimension stay well inside |cos| < 0.2
        vecs = [synthetic_embed(f"text-{i}", 768, 0) for i in range(200)]
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            i, j = rng.integers(0, 200, size=2)
            if i == j:
                continue
            worst = max(worst, abs(cosine_similarity(vecs[i], vecs[j])))
        assert worst < 0.2

    def test_tiny_dim_rejected(self):
        with pytest.raises(ValueError):
            synthetic_embed("x", 1, 0)


class TestPlantedCorpus:
    def test_intra_cluster_cosine_matches_target(self):
        recs = generate_planted_corpus(8, 40, 0.9, dim=256, seed=1)
        by_cluster = {}
        for r in recs:
            by_cluster.setdefault(r.cluster_label, []).append(r.embedding)
        sims = []
        for members in by_cluster.values():
            mat = np.stack(members)
            gram = mat @ mat.T
            n = len(members)
            sims.extend(gram[np.triu_indices(n, k=1)])
        assert 0.85 <= float(np.mean(sims)) <= 0.95

    def test_single_cluster_all_similar(self):
        recs = generate_planted_corpus(1, 30, 0.9, dim=256, seed=2)
        mat = np.stack([r.embedding for r in recs])
        gram = mat @ mat.T
        assert float(gram.min()) > 0.8

    def test_within_exceeds_cross_by_margin(self):
        recs = generate_planted_corpus(6, 30, 0.85, dim=256, seed=3)
        labels = np.array([r.cluster_label for r in recs])
        mat = np.stack([r.embedding for r in recs])
        gram = mat @ mat.T
        same = labels[:, None] == labels[None, :]
        triu = np.triu(np.ones_like(gram, dtype=bool), k=1)
        within = float(gram[same & triu].mean())
        cross = float(gram[~same & triu].mean())
        assert within - cross >= 0.3

    def test_zipf_zero_uniform(self):
        recs = generate_planted_corpus(10, 20, 0.9, dim=64, seed=4, zipf_s=0.0)
        counts = {}
        for r in recs:
            counts[r.cluster_label] = counts.get(r.cluster_label, 0) + 1
        assert all(c == 20 for c in counts.values())

    def test_zipf_skew_monotone(self):
        counts = zipf_counts(20, 2000, 1.0)
        assert counts[0] > counts[-1]
        assert sum(counts) == 2000
        assert counts == sorted(counts, reverse=True)

    def test_bad_intra_sim(self):
        with pytest.raises(ValueError):
            generate_planted_corpus(2, 5, 1.5, dim=32, seed=0)
        with pytest.raises(ValueError):
            noise_sigma(0.0, 32)

    def test_records_carry_labels_and_responses(self):
        recs = generate_planted_corpus(3, 4, 0.9, dim=32, seed=5)
        assert len(recs) == 12
        for r in recs:
            assert r.cluster_label in (0, 1, 2)
            assert r.response == f"response:topic-{r.cluster_label:05d}"
        ts = [r.timestamp for r in recs]
        assert ts == sorted(ts)


class TestQueryLogIO:
    def test_round_trip(self, tmp_path):
        recs = generate_planted_corpus(2, 3, 0.9, dim=16, seed=6)
        path = tmp_path / "log.jsonl"
        dump_query_log(recs, str(path))
        loaded = load_query_log(str(path))
        assert [r.id for r in loaded] == [r.id for r in recs]
        assert [r.response for r in loaded] == [r.response for r in recs]
        for a, b in zip(loaded, recs):
            assert np.allclose(a.embedding, b.embedding, atol=1e-6)

    def test_unknown_fields_ignored(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text(
            json.dumps({"id": "a", "user": "u", "ts": 1.0, "text": "t", "extra": 42}) + "\n"
        )
        recs = load_query_log(str(path))
        assert len(recs) == 1
        assert recs[0].embedding is None

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "log.jsonl"
        lines = [json.dumps({"id": str(i), "user": "u", "ts": float(i), "text": "t"}) for i in range(6)]
        lines.append("{not json")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="line 7"):
            load_query_log(str(path))

    def test_missing_field_reported(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text(json.dumps({"id": "a", "user": "u", "ts": 1.0}) + "\n")
        with pytest.raises(ValueError, match="line 1"):
            load_query_log(str(path))
