import math

import numpy as np
import pytest

from bioir import ConfigError, DataError
from bioir.corpus import Segment, UnitKind
from bioir.embedding import HashingEmbedder
from bioir.polydpr import (
    DEFAULT_K,
    DenseIndex,
    PolyCodes,
    RetrieverModel,
    TrainConfig,
    build_dense_index,
    encode_context,
    grad_check,
    infer_similarity,
    nll_loss,
    search_dense,
    train,
    train_similarity,
)
from bioir.pretrain import TASK_SUPERVISED, TrainingPair


def seg(ref, text):
    return Segment(ref, ref.split("#")[0], 0, UnitKind.FULL_DOC, text)


class TestEncodeContext:
    def test_hand_softmax_attention(self):
        # One code m = (ln 3, 0) over two one-hot token vectors:
        # attention = softmax(ln 3, 0) = (0.75, 0.25).
        H = np.array([[1.0, 0.0], [0.0, 1.0]])
        codes = PolyCodes(np.array([[math.log(3.0), 0.0]]))
        V = encode_context(H, codes)
        assert V.shape == (1, 2)
        assert V[0] == pytest.approx([0.75, 0.25], abs=1e-12)

    def test_uniform_attention_on_orthogonal_tokens(self):
        # A zero code attends uniformly: V = mean of token vectors.
        H = np.array([[2.0, 0.0], [0.0, 4.0]])
        codes = PolyCodes(np.zeros((1, 2)))
        V = encode_context(H, codes)
        assert V[0] == pytest.approx([1.0, 2.0], abs=1e-12)

    def test_rows_live_in_token_convex_hull(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            H = rng.normal(size=(5, 8))
            codes = PolyCodes(rng.normal(size=(3, 8)))
            V = encode_context(H, codes)
            assert V.shape == (3, 8)
            # Each output row is a convex combination of token rows, so its
            # coordinates are bounded by the per-axis token extremes.
            for k in range(3):
                assert np.all(V[k] <= H.max(axis=0) + 1e-12)
                assert np.all(V[k] >= H.min(axis=0) - 1e-12)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            encode_context(np.ones((2, 3)), PolyCodes(np.ones((1, 4))))


class TestSimilarities:
    def test_train_similarity_hand_value(self):
        v_q = np.array([1.0, 0.0])
        V = np.array([[2.0, 0.0], [0.0, 2.0]])
        # Per-code dots a = (2, 0); weights softmax(a); sim = w . a.
        e2 = math.exp(2.0)
        expect = 2.0 * e2 / (e2 + 1.0)
        assert train_similarity(v_q, V) == pytest.approx(expect, abs=1e-12)

    def test_infer_similarity_is_max_dot(self):
        v_q = np.array([1.0, 0.0])
        V = np.array([[2.0, 0.0], [0.0, 5.0]])
        assert infer_similarity(v_q, V) == 2.0

    def test_infer_matches_brute_force_row_scan(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            v_q = rng.normal(size=6)
            V = rng.normal(size=(4, 6))
            brute = max(float(np.dot(row, v_q)) for row in V)
            assert infer_similarity(v_q, V) == brute

    def test_train_similarity_between_min_and_max_dot(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            v_q = rng.normal(size=5)
            V = rng.normal(size=(3, 5))
            dots = [float(np.dot(row, v_q)) for row in V]
            s = train_similarity(v_q, V)
            assert min(dots) - 1e-12 <= s <= max(dots) + 1e-12

    def test_k1_collapse_bitwise(self):
        # With one code both paths are exactly the plain inner product.
        rng = np.random.default_rng(21)
        for _ in range(200):
            v_q = rng.normal(size=16)
            V = rng.normal(size=(1, 16))
            inner = float(np.dot(V[0], v_q))
            assert train_similarity(v_q, V) == inner
            assert infer_similarity(v_q, V) == inner


class TestNll:
    def test_uniform_scores(self):
        assert nll_loss(np.zeros((4, 4))) == pytest.approx(math.log(4.0), abs=1e-12)

    def test_hand_two_by_two(self):
        scores = np.array([[1.0, -1.0], [-1.0, 1.0]])
        expect = math.log(1.0 + math.exp(-2.0))
        assert nll_loss(scores) == pytest.approx(expect, abs=1e-12)

    def test_confident_diagonal_drives_loss_down(self):
        sharp = nll_loss(10.0 * np.eye(3))
        assert sharp < nll_loss(np.eye(3)) < nll_loss(np.zeros((3, 3)))

    def test_non_square_rejected(self):
        with pytest.raises(DataError):
            nll_loss(np.zeros((2, 3)))


class TestModelAndCodes:
    def test_initialize_shapes_and_determinism(self):
        m1 = RetrieverModel.initialize(6, 32, seed=3)
        m2 = RetrieverModel.initialize(6, 32, seed=3)
        m3 = RetrieverModel.initialize(6, 32, seed=4)
        assert m1.codes.matrix.shape == (6, 32)
        assert m1.projection.shape == (32, 32)
        assert np.array_equal(m1.codes.matrix, m2.codes.matrix)
        assert np.array_equal(m1.projection, m2.projection)
        assert not np.array_equal(m1.codes.matrix, m3.codes.matrix)

    def test_copy_is_independent(self):
        m = RetrieverModel.initialize(2, 8, seed=0)
        c = m.copy()
        c.codes.matrix[0, 0] += 1.0
        assert m.codes.matrix[0, 0] != c.codes.matrix[0, 0]

    def test_model_round_trip(self, tmp_path):
        m = RetrieverModel.initialize(3, 16, seed=7, provenance={"note": "x"})
        p = str(tmp_path / "m.bin")
        m.save(p)
        back = RetrieverModel.load(p)
        assert np.array_equal(back.codes.matrix, m.codes.matrix)
        assert np.array_equal(back.projection, m.projection)
        assert back.provenance["note"] == "x"

    def test_model_file_byte_stable(self, tmp_path):
        m = RetrieverModel.initialize(3, 16, seed=7)
        p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
        m.save(p1)
        RetrieverModel.load(p1).save(p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_checksum_tracks_content(self):
        a = PolyCodes(np.ones((2, 4)))
        b = PolyCodes(np.ones((2, 4)))
        c = PolyCodes(np.full((2, 4), 2.0))
        assert a.checksum() == b.checksum() != c.checksum()

    def test_garbage_file_rejected(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"not a model at all")
        with pytest.raises(DataError):
            RetrieverModel.load(str(p))

    def test_query_provider_applies_projection(self):
        emb = HashingEmbedder(dim=16, seed=1)
        m = RetrieverModel.initialize(2, 16, seed=5)
        wrapped = m.query_provider(emb)
        expect = m.projection @ emb.query_vector("some text")
        assert np.allclose(wrapped.query_vector("some text"), expect, atol=1e-15)
        # Context-side vectors pass through untouched.
        assert np.array_equal(wrapped.token_vectors("some text"), emb.token_vectors("some text"))


class TestDenseIndex:
    def build(self, n=10, dim=16, k=3):
        emb = HashingEmbedder(dim=dim, seed=2)
        codes = PolyCodes(np.random.default_rng(0).normal(size=(k, dim)))
        segments = [seg(f"s{i:03d}#full_doc#0", f"text number w{i} and w{i+1}") for i in range(n)]
        return build_dense_index(segments, emb, codes), emb, codes

    def test_entries_and_shapes(self):
        index, _, _ = self.build(n=5, dim=16, k=3)
        assert len(index.entries) == 5
        assert all(e.vectors.shape == (3, 16) for e in index.entries)

    def test_duplicate_refs_rejected(self):
        emb = HashingEmbedder(dim=8, seed=2)
        codes = PolyCodes(np.zeros((1, 8)))
        s = seg("dup#full_doc#0", "words here")
        with pytest.raises(DataError):
            build_dense_index([s, s], emb, codes)

    def test_round_trip_byte_stable(self, tmp_path):
        index, _, _ = self.build()
        p1, p2 = str(tmp_path / "a.pdix"), str(tmp_path / "b.pdix")
        index.save(p1)
        back = DenseIndex.load(p1)
        assert back.d == index.d and back.k == index.k
        assert [e.segment_ref for e in back.entries] == [e.segment_ref for e in index.entries]
        for a, b in zip(back.entries, index.entries):
            assert np.array_equal(a.vectors, b.vectors)
        back.save(p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_search_matches_naive_double_loop(self):
        index, emb, codes = self.build(n=40)
        query = "text number w7 and w8"
        got = search_dense(index, query, emb, top_k=10)
        v_q = emb.query_vector(query)
        naive = []
        for entry in index.entries:
            best = max(float(np.dot(row, v_q)) for row in entry.vectors)
            naive.append((entry.segment_ref, best))
        naive.sort(key=lambda x: (-x[1], x[0]))
        assert got == naive[:10]

    def test_search_validates_top_k(self):
        index, emb, _ = self.build(n=3)
        with pytest.raises(ConfigError):
            search_dense(index, "text", emb, top_k=0)


def toy_pairs(n=64, dim=32):
    # Each query shares a unique key token with its positive and nothing
    # else, so ranking is learnable from lexical overlap alone.
    return [
        TrainingPair(
            f"ask key{i} filler{i % 4}",
            f"body key{i} detail{i} other{i % 3}",
            TASK_SUPERVISED,
            f"d{i}",
        )
        for i in range(n)
    ]


class TestTraining:
    def test_loss_decreases_and_ranking_learned(self):
        emb = HashingEmbedder(dim=32, seed=6)
        pairs = toy_pairs()
        model = RetrieverModel.initialize(4, 32, seed=0)
        cfg = TrainConfig(epochs=100, batch_size=16, learning_rate=2.0, seed=0)
        trained = train(pairs, emb, model, cfg)
        losses = trained.provenance["epoch_losses"]
        assert losses[-1] < losses[0]

        segments = [seg(f"d{i}#full_doc#0", p.positive_text) for i, p in enumerate(pairs)]
        index = build_dense_index(segments, emb, trained.codes)
        wrapped = trained.query_provider(emb)
        hits_at_1 = 0
        for i, p in enumerate(pairs):
            top = search_dense(index, p.query_text, wrapped, top_k=1)
            hits_at_1 += top[0][0] == f"d{i}#full_doc#0"
        assert hits_at_1 / len(pairs) >= 0.9

    def test_input_model_untouched(self):
        emb = HashingEmbedder(dim=16, seed=6)
        model = RetrieverModel.initialize(2, 16, seed=0)
        before = model.codes.matrix.copy()
        train(toy_pairs(16, 16), emb, model, TrainConfig(epochs=2, batch_size=4, learning_rate=0.5, seed=0))
        assert np.array_equal(model.codes.matrix, before)

    def test_zero_epochs_returns_equal_model(self):
        emb = HashingEmbedder(dim=16, seed=6)
        model = RetrieverModel.initialize(2, 16, seed=0)
        out = train(toy_pairs(8, 16), emb, model, TrainConfig(epochs=0, batch_size=4, learning_rate=0.5, seed=0))
        assert np.array_equal(out.codes.matrix, model.codes.matrix)
        assert np.array_equal(out.projection, model.projection)

    def test_deterministic_per_seed(self):
        emb = HashingEmbedder(dim=16, seed=6)
        model = RetrieverModel.initialize(2, 16, seed=0)
        cfg = TrainConfig(epochs=3, batch_size=8, learning_rate=0.5, seed=5)
        a = train(toy_pairs(24, 16), emb, model, cfg)
        b = train(toy_pairs(24, 16), emb, model, cfg)
        assert np.array_equal(a.codes.matrix, b.codes.matrix)
        assert np.array_equal(a.projection, b.projection)
        c = train(toy_pairs(24, 16), emb, model,
                  TrainConfig(epochs=3, batch_size=8, learning_rate=0.5, seed=6))
        assert not np.array_equal(a.codes.matrix, c.codes.matrix)

    def test_schedules_differ_and_record_provenance(self):
        emb = HashingEmbedder(dim=16, seed=6)
        model = RetrieverModel.initialize(2, 16, seed=0)
        main, pre = toy_pairs(16, 16), toy_pairs(16, 16)[::-1]
        seq = train(main, emb, model,
                    TrainConfig(epochs=2, batch_size=4, learning_rate=0.5, seed=0, schedule="sequential"),
                    pretrain_pairs=pre)
        multi = train(main, emb, model,
                      TrainConfig(epochs=2, batch_size=4, learning_rate=0.5, seed=0, schedule="multitask"),
                      pretrain_pairs=pre)
        assert seq.provenance["schedule"] == "sequential"
        assert multi.provenance["schedule"] == "multitask"
        assert not np.array_equal(seq.codes.matrix, multi.codes.matrix)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1, batch_size=4, learning_rate=0.5, seed=0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=1, batch_size=1, learning_rate=0.5, seed=0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=1, batch_size=4, learning_rate=0.0, seed=0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=1, batch_size=4, learning_rate=0.5, seed=0, schedule="warmup")

    def test_empty_pairs_rejected(self):
        emb = HashingEmbedder(dim=16, seed=6)
        model = RetrieverModel.initialize(2, 16, seed=0)
        with pytest.raises(DataError):
            train([], emb, model, TrainConfig(epochs=1, batch_size=4, learning_rate=0.5, seed=0))


class TestGradCheck:
    def batch(self, n=4):
        return toy_pairs(n, 16)

    def test_analytic_matches_numeric(self):
        emb = HashingEmbedder(dim=16, seed=6)
        model = RetrieverModel.initialize(6, 16, seed=0)
        errors = grad_check(model, emb, self.batch(), epsilon=1e-5)
        assert set(errors) == {"codes", "projection"}
        assert errors["codes"] < 1e-4
        assert errors["projection"] < 1e-4

    def test_corrupted_gradient_flagged(self):
        emb = HashingEmbedder(dim=16, seed=6)
        model = RetrieverModel.initialize(6, 16, seed=0)
        errors = grad_check(model, emb, self.batch(), epsilon=1e-5, corrupt=("codes", 0, 0.1))
        assert errors["codes"] > 1e-2
