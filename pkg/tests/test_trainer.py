import math

import numpy as np
import pytest
from fdcheck import fd_input_grad, fd_output_grad, max_mixed_error
from synth import two_community_corpus

from metaprod2vec.corpus import (
    PHASE_FINAL,
    MetadataMap,
    Session,
    build_vocabulary,
    split_sessions,
)
from metaprod2vec.pairs import (
    PairKind,
    SamplingRng,
    TrainingPair,
    build_negative_sampler,
    generate_pairs,
    sample_negatives,
    stream_seed,
)
from metaprod2vec.trainer import (
    HyperParams,
    TrainingDiverged,
    init_model,
    load_embeddings,
    pair_gradients,
    pair_loss,
    save_embeddings,
    sgns_step,
    train,
)


def small_vocab(n=6):
    return build_vocabulary([[f"t{i}"] * (i + 1) for i in range(n)], None, min_count=1)


def random_model(v=6, dim=4, seed=0, scale=0.4):
    model = init_model(small_vocab(v), dim, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    model.w_in[:] = rng.normal(0, scale, model.w_in.shape)
    model.w_out[:] = rng.normal(0, scale, model.w_out.shape)
    return model


class TestInitModel:
    def test_ranges(self):
        model = init_model(small_vocab(), 50, seed=3)
        assert np.abs(model.w_in).max() <= 0.01
        assert (model.w_out == 0).all()

    def test_deterministic(self):
        a = init_model(small_vocab(), 8, seed=5)
        b = init_model(small_vocab(), 8, seed=5)
        assert (a.w_in == b.w_in).all()

    def test_seeds_differ(self):
        a = init_model(small_vocab(), 8, seed=5)
        b = init_model(small_vocab(), 8, seed=6)
        assert (a.w_in != b.w_in).any()

    def test_bad_dim(self):
        with pytest.raises(ValueError, match="dim"):
            init_model(small_vocab(), 0, seed=1)


class TestPairLoss:
    def test_zero_model_one_negative(self):
        model = init_model(small_vocab(), 4, seed=1)
        model.w_in[:] = 0
        loss = pair_loss(model, TrainingPair(0, 1, PairKind.JI), [2])
        assert loss == pytest.approx(2 * math.log(2), abs=1e-12)

    @pytest.mark.parametrize("k", [1, 3, 7])
    def test_zero_model_k_negatives(self, k):
        model = init_model(small_vocab(2 + k), 4, seed=1)
        model.w_in[:] = 0
        loss = pair_loss(model, TrainingPair(0, 1, PairKind.JI), list(range(2, 2 + k)))
        assert loss == pytest.approx((k + 1) * math.log(2), abs=1e-12)

    def test_matches_independent_scalar_evaluation(self):
        # the oracle below recodes the formula from scratch with math.* only
        model = random_model(v=4, dim=3, seed=9)
        pair = TrainingPair(1, 3, PairKind.JI)
        negatives = [0, 2]
        expected = 0.0
        s = sum(model.w_in[1][d] * model.w_out[3][d] for d in range(3))
        expected += -math.log(1.0 / (1.0 + math.exp(-s)))
        for n in negatives:
            s = sum(model.w_in[1][d] * model.w_out[n][d] for d in range(3))
            expected += -math.log(1.0 / (1.0 + math.exp(s)))
        assert pair_loss(model, pair, negatives) == pytest.approx(expected, abs=1e-12)

    def test_extreme_scores_stay_finite(self):
        model = random_model(v=4, dim=3, seed=2)
        model.w_in[1] = 40.0
        model.w_out[3] = 40.0
        model.w_out[0] = -40.0
        loss = pair_loss(model, TrainingPair(1, 3, PairKind.JI), [0])
        assert math.isfinite(loss)

    def test_validation(self):
        model = random_model()
        with pytest.raises(ValueError, match="nonempty"):
            pair_loss(model, TrainingPair(0, 1, PairKind.JI), [])
        with pytest.raises(IndexError, match="out of range"):
            pair_loss(model, TrainingPair(0, 99, PairKind.JI), [1])
        with pytest.raises(ValueError, match="positive output"):
            pair_loss(model, TrainingPair(0, 1, PairKind.JI), [1, 2])


class TestGradients:
    def test_analytic_matches_finite_differences(self):
        eps = 1e-5
        rng = np.random.default_rng(11)
        for trial in range(10):
            v = int(rng.integers(4, 10))
            dim = int(rng.integers(2, 6))
            model = random_model(v=v, dim=dim, seed=trial)
            out = int(rng.integers(v))
            inp = int(rng.integers(v))
            pool = [i for i in range(v) if i != out]
            negs = list(rng.choice(pool, size=min(3, len(pool)), replace=False))
            pair = TrainingPair(inp, out, PairKind.JI)
            _, grad_in, grad_out, grad_negs = pair_gradients(model, pair, negs)
            assert max_mixed_error(grad_in, fd_input_grad(model, pair, negs, eps)) < 1e-5
            assert max_mixed_error(grad_out, fd_output_grad(model, out, pair, negs, eps)) < 1e-5
            for q, n in enumerate(negs):
                fd = fd_output_grad(model, n, pair, negs, eps)
                assert max_mixed_error(grad_negs[q], fd) < 1e-5


class TestSgnsStep:
    def test_zero_weight_leaves_model_unchanged(self):
        model = random_model(seed=4)
        w_in, w_out = model.w_in.copy(), model.w_out.copy()
        loss = sgns_step(model, TrainingPair(0, 1, PairKind.MM), [2, 3], 0.1, kind_weight=0.0)
        assert loss > 0
        assert (model.w_in == w_in).all() and (model.w_out == w_out).all()

    def test_step_decreases_own_loss(self):
        model = random_model(seed=8)
        pair = TrainingPair(2, 4, PairKind.JI)
        negs = [0, 1]
        before = sgns_step(model, pair, negs, learning_rate=1e-3)
        after = pair_loss(model, pair, negs)
        assert after < before

    def test_returns_loss_before_update(self):
        model = random_model(seed=8)
        pair = TrainingPair(2, 4, PairKind.JI)
        expected = pair_loss(model, pair, [0])
        assert sgns_step(model, pair, [0], 0.05) == pytest.approx(expected, rel=1e-12)

    def test_weight_scales_update(self):
        a, b = random_model(seed=6), random_model(seed=6)
        pair = TrainingPair(1, 2, PairKind.MI)
        sgns_step(a, pair, [3], learning_rate=0.02, kind_weight=0.5)
        sgns_step(b, pair, [3], learning_rate=0.01, kind_weight=1.0)
        np.testing.assert_allclose(a.w_in, b.w_in, rtol=1e-12)
        np.testing.assert_allclose(a.w_out, b.w_out, rtol=1e-12)

    def test_nonfinite_update_raises(self):
        model = random_model(seed=3)
        model.w_in[0, 0] = np.inf
        with pytest.raises(TrainingDiverged):
            sgns_step(model, TrainingPair(0, 1, PairKind.JI), [2], 0.1)

    def test_bad_learning_rate(self):
        with pytest.raises(ValueError, match="learning_rate"):
            sgns_step(random_model(), TrainingPair(0, 1, PairKind.JI), [2], 0.0)


def tiny_sessions(n=40, seed=0):
    rng = np.random.default_rng(seed)
    items = [f"s{i}" for i in range(12)]
    meta = MetadataMap("cat", {t: f"g{i % 3}" for i, t in enumerate(items)})
    sessions = [
        Session(f"u{j}", tuple(items[int(rng.integers(12))] for _ in range(6)))
        for j in range(n)
    ]
    return sessions, meta


def reference_train(split, metadata, params, vocabulary):
    """Pure-Python replay of the compiled training loop, step for step."""
    model = init_model(vocabulary, params.dim, params.seed, dtype=params.np_dtype)
    sampler = build_negative_sampler(vocabulary, params.power)
    enabled = params.enabled_kinds()
    side_on = len(enabled) > 1
    used_meta = list(metadata) if (metadata and side_on) else []
    table = vocabulary.metadata_table(used_meta)
    seqs = [vocabulary.encode(s) for s in split.train_sessions]
    metas = [table[:, seq] for seq in seqs]
    lam = params.lambda_vector()
    session_pairs = [
        generate_pairs(seqs[s], metas[s], params.window, enabled)
        for s in range(len(seqs))
    ]
    per_epoch = sum(len(p) for p in session_pairs)
    total = float(params.epochs * per_epoch)
    shuffle_rng = np.random.default_rng([params.seed, 0xC0FFEE])
    t_global = 0
    for epoch in range(params.epochs):
        order = shuffle_rng.permutation(len(seqs))
        for s in order:
            rng = SamplingRng.from_state(stream_seed(params.seed, epoch, int(s)))
            for pair in session_pairs[s]:
                lr = params.learning_rate * max(1.0 - t_global / total, 1e-4)
                t_global += 1
                negs = sample_negatives(sampler, params.negatives, pair.output_index, rng)
                sgns_step(model, pair, negs, lr, float(lam[int(pair.kind)]))
    return model


class TestTrain:
    def params(self, **kw):
        base = dict(
            dim=6, window=2, epochs=2, negatives=3, learning_rate=0.05,
            min_count=1, seed=7, lambdas={k: 1.0 for k in
                                          (PairKind.IM, PairKind.JM, PairKind.MI, PairKind.MM)},
        )
        base.update(kw)
        return HyperParams(**base)

    def test_compiled_loop_matches_reference(self):
        sessions, meta = tiny_sessions(25)
        split = split_sessions(sessions, PHASE_FINAL)
        params = self.params(dtype="float64")
        vocab = build_vocabulary(split.train_sessions, [meta], 1)
        fast = train(split, [meta], params, vocabulary=vocab)
        slow = reference_train(split, [meta], params, vocab)
        np.testing.assert_allclose(fast.w_in, slow.w_in, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(fast.w_out, slow.w_out, rtol=1e-8, atol=1e-12)

    def test_lambda_zero_reduces_to_items_only(self):
        sessions, meta = tiny_sessions(30)
        split = split_sessions(sessions, PHASE_FINAL)
        zeroed = self.params(lambdas={k: 0.0 for k in
                                      (PairKind.IM, PairKind.JM, PairKind.MI, PairKind.MM)})
        plain = self.params(lambdas={})
        a = train(split, [meta], zeroed)
        b = train(split, None, plain)
        assert a.vocabulary.tokens == b.vocabulary.tokens
        assert (a.w_in == b.w_in).all()
        assert (a.w_out == b.w_out).all()

    def test_single_thread_determinism(self):
        sessions, meta = tiny_sessions(30)
        split = split_sessions(sessions, PHASE_FINAL)
        a = train(split, [meta], self.params())
        b = train(split, [meta], self.params())
        assert (a.w_in == b.w_in).all() and (a.w_out == b.w_out).all()

    def test_finiteness(self):
        sessions, meta = tiny_sessions(50, seed=5)
        split = split_sessions(sessions, PHASE_FINAL)
        model = train(split, [meta], self.params(epochs=3, learning_rate=0.25))
        assert np.isfinite(model.w_in).all() and np.isfinite(model.w_out).all()

    def test_side_kinds_need_metadata(self):
        sessions, _ = tiny_sessions(10)
        split = split_sessions(sessions, PHASE_FINAL)
        with pytest.raises(ValueError, match="metadata"):
            train(split, None, self.params())

    def test_no_pairs_is_error(self):
        split = split_sessions([Session("u", ("a", "a", "a"))], PHASE_FINAL)
        params = self.params(lambdas={}, window=1)
        # only one distinct item: after min_count filtering a vocabulary of one
        # item yields JI pairs (a,a); use min_count high enough to drop it
        with pytest.raises(ValueError):
            train(split, None, HyperParams(dim=4, epochs=1, min_count=5, lambdas={}))

    def test_writes_training_log(self, tmp_path):
        import json

        sessions, meta = tiny_sessions(20)
        split = split_sessions(sessions, PHASE_FINAL)
        log = tmp_path / "train.log.jsonl"
        train(split, [meta], self.params(epochs=2), log_path=str(log))
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(records) == 2
        assert records[0]["epoch"] == 0
        assert set(records[0]["mean_loss"]) == {"JI", "IM", "JM", "MI", "MM"}
        assert records[1]["mean_loss"]["JI"] < records[0]["mean_loss"]["JI"] * 1.5

    def test_parallel_mode_trains_sanely(self):
        sessions, meta = tiny_sessions(60, seed=2)
        split = split_sessions(sessions, PHASE_FINAL)
        model = train(split, [meta], self.params(threads=2, epochs=2))
        assert np.isfinite(model.w_in).all() and np.isfinite(model.w_out).all()
        assert np.abs(model.w_in).max() > 0

    def test_community_separation(self):
        sessions = two_community_corpus(n_sessions=400, items_per_side=12, seed=3)
        split = split_sessions(sessions, PHASE_FINAL)
        params = HyperParams(dim=12, window=3, epochs=4, negatives=5,
                             learning_rate=0.05, min_count=1, seed=1, lambdas={})
        model = train(split, None, params)
        vocab = model.vocabulary
        normed = model.w_in / np.linalg.norm(model.w_in, axis=1, keepdims=True)
        a_idx = [vocab.index(t) for t in vocab.tokens if t.startswith("a")]
        b_idx = [vocab.index(t) for t in vocab.tokens if t.startswith("b")]
        sims = normed @ normed.T
        intra = (sims[np.ix_(a_idx, a_idx)].mean() + sims[np.ix_(b_idx, b_idx)].mean()) / 2
        inter = sims[np.ix_(a_idx, b_idx)].mean()
        assert intra > inter + 0.2


class TestEmbeddingIO:
    def test_round_trip(self, tmp_path):
        model = random_model(v=5, dim=3, seed=1)
        model32 = init_model(model.vocabulary, 3, seed=1)
        model32.w_in[:] = np.random.default_rng(0).normal(0, 0.5, model32.w_in.shape)
        path = str(tmp_path / "v.vec")
        save_embeddings(model32, path, which="both")
        loaded = load_embeddings(path)
        assert loaded.vocabulary.tokens == model32.vocabulary.tokens
        np.testing.assert_array_equal(loaded.w_in, model32.w_in)
        np.testing.assert_array_equal(loaded.w_out, model32.w_out)

    def test_round_trip_precision_float64(self, tmp_path):
        model = random_model(v=4, dim=2, seed=2)
        path = str(tmp_path / "v.vec")
        save_embeddings(model, path)
        loaded = load_embeddings(path, dtype=np.float64)
        assert np.abs(loaded.w_in - model.w_in).max() < 1e-8

    def test_input_only_gives_zero_output_table(self, tmp_path):
        model = random_model(v=4, dim=2, seed=2)
        path = str(tmp_path / "v.vec")
        save_embeddings(model, path, which="input")
        loaded = load_embeddings(path)
        assert (loaded.w_out == 0).all()

    def test_header_row_mismatch_error(self, tmp_path):
        path = tmp_path / "bad.vec"
        path.write_text("3 2\nt0 0.1 0.2\nt1 0.3 0.4\n")
        with pytest.raises(ValueError, match="3 rows, found 2"):
            load_embeddings(str(path))

    def test_wrong_width_error(self, tmp_path):
        path = tmp_path / "bad.vec"
        path.write_text("1 3\nt0 0.1 0.2\n")
        with pytest.raises(ValueError, match="expected 3 values"):
            load_embeddings(str(path))

    def test_token_with_space_rejected(self, tmp_path):
        from metaprod2vec.corpus import Vocabulary
        from metaprod2vec.trainer import EmbeddingModel

        vocab = Vocabulary(["ok", "not ok"], [1, 1], [False, False])
        model = EmbeddingModel(vocab, np.zeros((2, 2), np.float32), np.zeros((2, 2), np.float32))
        with pytest.raises(ValueError, match="whitespace"):
            save_embeddings(model, str(tmp_path / "x.vec"))

    def test_metadata_flag_restored_from_prefix(self, tmp_path):
        meta = MetadataMap("artist", {"a": "X", "b": "X"})
        vocab = build_vocabulary([["a", "b", "a", "b"]], [meta], 1)
        model = init_model(vocab, 2, seed=0)
        path = str(tmp_path / "v.vec")
        save_embeddings(model, path)
        loaded = load_embeddings(path)
        idx = loaded.vocabulary.index("artist:X")
        assert loaded.vocabulary.is_metadata[idx]
        assert not loaded.vocabulary.is_metadata[loaded.vocabulary.index("a")]
