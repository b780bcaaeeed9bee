import math

import numpy as np
import pytest

from metaprod2vec.corpus import MetadataMap, Vocabulary, build_vocabulary
from metaprod2vec.scorers import (
    COCOUNT_PAIR_NORM,
    BestOfScorer,
    CoCountScorer,
    EmbeddingScorer,
    MixScorer,
    UnknownItemError,
    build_cocounts,
    cosine,
    mix_top_k,
    top_k,
)
from metaprod2vec.trainer import EmbeddingModel, init_model


class TestCosine:
    def test_self_similarity(self):
        x = np.array([0.3, -1.2, 4.0])
        assert cosine(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_closed_form(self):
        assert cosine([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_zero_norm_gives_zero(self):
        assert cosine([0.0, 0.0], [1.0, 2.0]) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            cosine([1.0], [1.0, 2.0])


def make_vocab(tokens, freqs=None, meta_flags=None):
    n = len(tokens)
    return Vocabulary(tokens, freqs or [1] * n, meta_flags or [False] * n)


class TestBuildCocounts:
    def test_window_one_by_hand(self):
        vocab = make_vocab(["a", "b", "c"])
        m = build_cocounts([["a", "b", "c"]], 1, vocab)
        assert m.count(vocab.index("a"), vocab.index("b")) == 1
        assert m.count(vocab.index("b"), vocab.index("c")) == 1
        assert m.count(vocab.index("a"), vocab.index("c")) == 0

    def test_additive_over_sessions(self):
        vocab = make_vocab(["a", "b"])
        m = build_cocounts([["a", "b"], ["a", "b"]], 1, vocab)
        assert m.count(vocab.index("a"), vocab.index("b")) == 2

    def test_symmetric_and_diagonal_free(self):
        vocab = make_vocab(["a", "b", "c"])
        m = build_cocounts([["a", "b", "a", "c", "a"]], 2, vocab)
        dense = m.counts.toarray()
        np.testing.assert_array_equal(dense, dense.T)
        assert (np.diag(dense) == 0).all()

    def test_matches_brute_force_counter(self):
        rng = np.random.default_rng(0)
        tokens = [f"t{i}" for i in range(8)]
        vocab = make_vocab(tokens)
        sessions = [
            [tokens[int(rng.integers(8))] for _ in range(int(rng.integers(2, 9)))]
            for _ in range(50)
        ]
        window = 3
        m = build_cocounts(sessions, window, vocab)
        brute = np.zeros((8, 8))
        for s in sessions:
            idx = [vocab.index(t) for t in s]
            for p in range(len(idx)):
                for q in range(p + 1, min(p + window + 1, len(idx))):
                    if idx[p] != idx[q]:
                        brute[idx[p], idx[q]] += 1
                        brute[idx[q], idx[p]] += 1
        np.testing.assert_array_equal(m.counts.toarray(), brute)
        assert m.total_pairs == brute.sum() // 2

    def test_occurrences(self):
        vocab = make_vocab(["a", "b"])
        m = build_cocounts([["a", "a", "b"]], 1, vocab)
        assert m.occurrences[vocab.index("a")] == 2
        assert m.occurrences[vocab.index("b")] == 1


def embedding_scorer(rows: dict[str, list[float]], meta_flags=None):
    tokens = list(rows)
    vocab = make_vocab(tokens, meta_flags=meta_flags)
    table = np.array([rows[t] for t in tokens], dtype=np.float32)
    model = EmbeddingModel(vocab, table, np.zeros_like(table))
    return EmbeddingScorer(model)


class TestTopK:
    def test_bestof_is_popularity_sorted(self):
        vocab = make_vocab(["top", "mid", "low", "query"], freqs=[30, 20, 10, 1])
        scorer = BestOfScorer(vocab)
        result = top_k(scorer, "query", 3)
        assert [t for t, _ in result] == ["top", "mid", "low"]
        scores = [s for _, s in result]
        assert scores == sorted(scores, reverse=True)

    def test_bestof_ignores_query_identity(self):
        vocab = make_vocab(["a", "b", "c"], freqs=[3, 2, 1])
        scorer = BestOfScorer(vocab)
        assert [t for t, _ in scorer.top_k("c", 1)] == ["a"]
        assert [t for t, _ in scorer.top_k("b", 1)] == ["a"]

    def test_identical_vectors_rank_first_with_score_one(self):
        scorer = embedding_scorer({"a": [1, 0], "b": [1, 0], "c": [0, 1]})
        result = scorer.top_k("a", 2)
        assert result[0][0] == "b"
        assert result[0][1] == pytest.approx(1.0, abs=1e-12)

    def test_query_excluded_and_metadata_excluded(self):
        scorer = embedding_scorer(
            {"a": [1, 0], "b": [1, 0], "m:X": [1, 0]},
            meta_flags=[False, False, True],
        )
        tokens = [t for t, _ in scorer.top_k("a", 10)]
        assert "a" not in tokens and "m:X" not in tokens
        assert tokens == ["b"]

    def test_metadata_query_allowed(self):
        scorer = embedding_scorer(
            {"a": [1, 0], "b": [0, 1], "m:X": [1, 0]},
            meta_flags=[False, False, True],
        )
        assert [t for t, _ in scorer.top_k("m:X", 1)] == ["a"]

    def test_unknown_query_raises(self):
        scorer = embedding_scorer({"a": [1, 0], "b": [0, 1]})
        with pytest.raises(UnknownItemError, match="nope"):
            scorer.top_k("nope", 3)

    def test_ties_break_by_vocabulary_index(self):
        scorer = embedding_scorer({"q": [1, 0], "x": [1, 0], "y": [1, 0], "z": [1, 0]})
        assert [t for t, _ in scorer.top_k("q", 3)] == ["x", "y", "z"]

    def test_fewer_candidates_than_k(self):
        scorer = embedding_scorer({"a": [1, 0], "b": [0, 1]})
        assert len(scorer.top_k("a", 10)) == 1

    def test_scores_non_increasing_and_prefix_of_full_ranking(self):
        rng = np.random.default_rng(1)
        rows = {f"t{i}": rng.normal(size=4).tolist() for i in range(30)}
        scorer = embedding_scorer(rows)
        full = scorer.top_k("t0", 29)
        scores = [s for _, s in full]
        assert all(a >= b for a, b in zip(scores, scores[1:]))
        assert scorer.top_k("t0", 7) == full[:7]

    def test_cocounts_row_cosine_reading(self):
        # corpus [[a, b, c]], window 1: rows a={b:1}, b={a:1, c:1}, c={b:1};
        # under row cosine the query a scores c at 1.0 (identical rows) and
        # b at 0.0 (disjoint rows)
        vocab = make_vocab(["a", "b", "c"])
        m = build_cocounts([["a", "b", "c"]], 1, vocab)
        scorer = CoCountScorer(m, vocab)
        result = scorer.top_k("a", 2)
        assert result[0] == ("c", pytest.approx(1.0))
        assert result[1] == ("b", pytest.approx(0.0))

    def test_cocounts_pair_norm_reading(self):
        # the direct-count variant ranks the actually co-occurring b first:
        # score(a, b) = X_ab / sqrt(X_a X_b) = 1, score(a, c) = 0
        vocab = make_vocab(["a", "b", "c"])
        m = build_cocounts([["a", "b", "c"]], 1, vocab)
        scorer = CoCountScorer(m, vocab, variant=COCOUNT_PAIR_NORM)
        result = scorer.top_k("a", 2)
        assert result[0] == ("b", pytest.approx(1.0, abs=1e-12))
        assert result[1] == ("c", pytest.approx(0.0))

    def test_cocounts_symmetry(self):
        vocab = make_vocab(["a", "b", "c", "d"])
        m = build_cocounts([["a", "b", "c", "d"], ["b", "d", "a"]], 2, vocab)
        scorer = CoCountScorer(m, vocab)
        for x, y in [("a", "b"), ("c", "d"), ("a", "d")]:
            assert scorer.score(x, y) == pytest.approx(scorer.score(y, x), abs=1e-12)


class TestMixScorer:
    def setup_method(self):
        self.emb = embedding_scorer(
            {"q": [1, 0], "x": [0.9, 0.1], "y": [0.5, 0.5], "z": [0, 1]}
        )
        vocab = self.emb.vocabulary
        m = build_cocounts([["q", "z", "q", "z"], ["q", "y"]], 1, vocab)
        self.co = CoCountScorer(m, vocab, variant=COCOUNT_PAIR_NORM)

    def test_alpha_one_equals_embedding_ranking(self):
        want = [t for t, _ in self.emb.top_k("q", 3)]
        got = [t for t, _ in mix_top_k(1.0, self.emb, self.co, "q", 3)]
        assert got == want

    def test_alpha_zero_equals_cocounts_ranking(self):
        want = [t for t, _ in self.co.top_k("q", 3)]
        got = [t for t, _ in mix_top_k(0.0, self.emb, self.co, "q", 3)]
        assert got == want

    def test_blend_is_linear(self):
        mix = MixScorer(0.3, self.emb, self.co)
        for c in ["x", "y", "z"]:
            expected = 0.3 * self.emb.score("q", c) + 0.7 * self.co.score("q", c)
            assert mix.score("q", c) == pytest.approx(expected, abs=1e-12)

    def test_pool_restricts_candidates(self):
        mix = MixScorer(0.5, self.emb, self.co, pool=1)
        tokens = {t for t, _ in mix.top_k("q", 10)}
        assert tokens <= {"x", "z"}  # each component contributes its single best

    def test_alpha_validation(self):
        with pytest.raises(ValueError, match="alpha"):
            MixScorer(1.5, self.emb, self.co)

    def test_component_scores_within_unit_interval(self):
        # holds for the default mix components: embedding cosine and
        # row-cosine CoCounts (the pair_norm variant is not bounded by 1
        # when items repeat inside a window)
        vocab = self.emb.vocabulary
        m = build_cocounts([["q", "z", "q", "z"], ["q", "y"]], 1, vocab)
        row_cosine = CoCountScorer(m, vocab)
        for c in ["x", "y", "z"]:
            assert -1.0 <= self.emb.score("q", c) <= 1.0
            assert -1.0 <= row_cosine.score("q", c) <= 1.0


class TestAgainstExhaustiveScoring:
    def test_topk_prefix_of_exhaustive_ranking(self):
        rng = np.random.default_rng(4)
        tokens = [f"i{n}" for n in range(200)]
        meta = MetadataMap("g", {t: f"v{n % 7}" for n, t in enumerate(tokens)})
        sessions = [
            [tokens[int(rng.integers(200))] for _ in range(6)] for _ in range(100)
        ]
        vocab = build_vocabulary(sessions, [meta], 1)
        model = init_model(vocab, 8, seed=0)
        model.w_in[:] = rng.normal(0, 1, model.w_in.shape).astype(np.float32)
        scorer = EmbeddingScorer(model)
        query = "i0"
        got = scorer.top_k(query, 10)
        qi = vocab.index(query)
        normed = model.w_in.astype(np.float64)
        normed /= np.linalg.norm(normed, axis=1, keepdims=True)
        sims = normed @ normed[qi]
        ranked = sorted(
            (
                (-sims[i], i)
                for i in range(len(vocab))
                if i != qi and not vocab.is_metadata[i]
            )
        )
        want = [(vocab.token(i), -s) for s, i in ranked[:10]]
        assert [t for t, _ in got] == [t for t, _ in want]
        np.testing.assert_allclose([s for _, s in got], [s for _, s in want], rtol=1e-12)
