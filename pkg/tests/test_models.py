"""Tests for the scoring backbones: init, tokenization, LSTM, scores, gradients."""
import numpy as np
import pytest

from tkgd.graph import Vocabulary, build_candidates
from tkgd.models import (
    GATES,
    GradAccum,
    TADistMultParams,
    TTransEParams,
    batch_candidate_backprop,
    batch_candidate_scores,
    init_params,
    lstm_backward,
    lstm_forward,
    score_candidates,
    score_quadruple,
    supervised_gradients,
    ta_tokenize,
    trilinear_score,
)
from tkgd.numerics import ParamTensor, finite_diff_check


def _vocab(n_entities, n_relations, years):
    return Vocabulary(
        [f"e{i}" for i in range(n_entities)],
        [f"r{j}" for j in range(n_relations)],
        list(years),
    )


def _tensor(rows):
    return ParamTensor(np.asarray(rows, dtype=np.float64))


def _zeroed_lstm(params: TADistMultParams) -> TADistMultParams:
    """Zero every gate matrix and bias, including the forget bias."""
    out = params.copy()
    for prefix in ("w", "u", "b"):
        for gate in GATES:
            getattr(out, f"{prefix}_{gate}").values[:] = 0.0
    return out


class TestInit:
    def test_shapes_ttranse(self):
        p = init_params("ttranse", 8, 11, 4, 5, seed=0)
        assert p.entity_emb.shape == (11, 8)
        assert p.relation_emb.shape == (4, 8)
        assert p.time_emb.shape == (5, 8)
        assert p.dim == 8

    def test_shapes_tadistmult(self):
        p = init_params("tadistmult", 6, 7, 3, 4, seed=0)
        assert p.entity_emb.shape == (7, 6)
        assert p.token_emb.shape == (3 + 10, 6)
        for prefix in ("w", "u"):
            for gate in GATES:
                assert getattr(p, f"{prefix}_{gate}").shape == (6, 6)
        for gate in GATES:
            assert getattr(p, f"b_{gate}").shape == (6,)
        assert p.n_relations == 3

    def test_embedding_rows_unit_norm(self):
        for backbone in ("ttranse", "tadistmult"):
            p = init_params(backbone, 16, 30, 5, 6, seed=3)
            for name, t in p.tables().items():
                if not name.endswith("_emb"):
                    continue
                norms = np.linalg.norm(t.values, axis=1)
                assert np.allclose(norms, 1.0, atol=1e-5), name

    def test_forget_bias_one_other_biases_zero(self):
        p = init_params("tadistmult", 5, 4, 2, 3, seed=9)
        assert np.all(p.b_forget.values == 1.0)
        for gate in ("input", "cell", "output"):
            assert np.all(getattr(p, f"b_{gate}").values == 0.0)

    def test_same_seed_same_params(self):
        a = init_params("tadistmult", 4, 6, 2, 3, seed=42)
        b = init_params("tadistmult", 4, 6, 2, 3, seed=42)
        for name in a.tables():
            assert np.array_equal(a.tables()[name].values, b.tables()[name].values), name

    def test_different_seed_differs(self):
        a = init_params("ttranse", 4, 6, 2, 3, seed=1)
        b = init_params("ttranse", 4, 6, 2, 3, seed=2)
        assert not np.array_equal(a.entity_emb.values, b.entity_emb.values)

    def test_dtype_and_accumulators(self):
        p = init_params("ttranse", 4, 3, 2, 2, seed=0)
        assert p.entity_emb.values.dtype == np.float32
        assert np.all(p.entity_emb.accum == 0.0)
        p64 = init_params("ttranse", 4, 3, 2, 2, seed=0, dtype=np.float64)
        assert p64.entity_emb.values.dtype == np.float64
        # same draws at either dtype, only the final cast differs
        assert np.allclose(p.entity_emb.values, p64.entity_emb.values, atol=1e-6)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            init_params("transe", 4, 3, 2, 2, seed=0)
        with pytest.raises(ValueError):
            init_params("ttranse", 0, 3, 2, 2, seed=0)
        with pytest.raises(ValueError):
            init_params("ttranse", 4, 3, 0, 2, seed=0)


class TestTTransEScore:
    def test_exact_translation_scores_zero(self):
        # s + p - o + t = (1,0) + (0,1) - (1,1) + (0,0) = 0
        params = TTransEParams(
            entity_emb=_tensor([[1.0, 0.0], [1.0, 1.0]]),
            relation_emb=_tensor([[0.0, 1.0]]),
            time_emb=_tensor([[0.0, 0.0]]),
        )
        vocab = _vocab(2, 1, [1900])
        assert score_quadruple(params, (0, 0, 1, 0), vocab) == 0.0

    def test_pythagorean_residual(self):
        params = TTransEParams(
            entity_emb=_tensor([[0.0, 0.0], [3.0, 4.0]]),
            relation_emb=_tensor([[0.0, 0.0]]),
            time_emb=_tensor([[0.0, 0.0]]),
        )
        vocab = _vocab(2, 1, [1900])
        assert score_quadruple(params, (0, 0, 1, 0), vocab) == pytest.approx(-5.0, abs=1e-12)

    def test_matches_norm_formula(self, rng):
        params = init_params("ttranse", 4, 6, 3, 2, seed=8, dtype=np.float64)
        vocab = _vocab(6, 3, [1900, 1910])
        for _ in range(20):
            s, p, o, t = (
                int(rng.integers(6)),
                int(rng.integers(3)),
                int(rng.integers(6)),
                int(rng.integers(2)),
            )
            want = -np.linalg.norm(
                params.entity_emb.values[s]
                + params.relation_emb.values[p]
                - params.entity_emb.values[o]
                + params.time_emb.values[t]
            )
            got = score_quadruple(params, (s, p, o, t), vocab)
            assert got == pytest.approx(want, abs=1e-12)

    def test_rotation_invariance(self):
        # scores depend only on norms, so one orthogonal map on every table
        # leaves them unchanged
        params = init_params("ttranse", 5, 8, 3, 4, seed=11, dtype=np.float64)
        vocab = _vocab(8, 3, [1900, 1905, 1910, 1920])
        q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
        rotated = params.copy()
        for t in rotated.tables().values():
            t.values[:] = t.values @ q.T
        quads = [(0, 0, 1, 0), (3, 2, 7, 3), (5, 1, 5, 2)]
        for quad in quads:
            a = score_quadruple(params, quad, vocab)
            b = score_quadruple(rotated, quad, vocab)
            assert b == pytest.approx(a, abs=1e-9)


class TestTokenize:
    def test_relation_then_four_digits(self):
        vocab = _vocab(3, 4, [7, 1879])
        assert ta_tokenize(3, 1, vocab).tolist() == [3, 4 + 1, 4 + 8, 4 + 7, 4 + 9]

    def test_small_year_zero_padded(self):
        vocab = _vocab(3, 4, [7, 1879])
        assert ta_tokenize(0, 0, vocab).tolist() == [0, 4 + 0, 4 + 0, 4 + 0, 4 + 7]

    def test_negative_year_uses_absolute_value(self):
        vocab = _vocab(3, 2, [-50, 1900])
        assert ta_tokenize(1, 0, vocab).tolist() == [1, 2 + 0, 2 + 0, 2 + 5, 2 + 0]

    def test_year_past_four_digits_keeps_last_four(self):
        vocab = _vocab(3, 2, [1900, 12345])
        assert ta_tokenize(0, 1, vocab).tolist() == [0, 2 + 2, 2 + 3, 2 + 4, 2 + 5]

    def test_same_pair_same_tokens(self):
        vocab = _vocab(3, 2, [1900, 1910])
        a = ta_tokenize(1, 1, vocab)
        b = ta_tokenize(1, 1, vocab)
        assert np.array_equal(a, b)
        assert a.dtype == np.int64


class TestLstm:
    def test_all_zero_weights_give_zero_state(self):
        params = _zeroed_lstm(init_params("tadistmult", 4, 3, 2, 2, seed=0, dtype=np.float64))
        vocab = _vocab(3, 2, [1900, 1910])
        h, cache = lstm_forward(ta_tokenize(0, 0, vocab), params)
        # every gate sits at sigmoid(0) or tanh(0), so the cell never fills
        assert np.array_equal(h, np.zeros(4))
        assert cache.h.shape == (5, 4)
        assert score_quadruple(params, (0, 0, 1, 0), vocab) == 0.0

    def test_scalar_recurrence_matches_reference(self):
        """d=1 LSTM against an explicit step-by-step recurrence."""
        weights = {
            "w_input": 0.5, "w_forget": -0.3, "w_cell": 0.8, "w_output": 0.2,
            "u_input": 0.1, "u_forget": 0.4, "u_cell": -0.6, "u_output": 0.7,
            "b_input": 0.05, "b_forget": 1.0, "b_cell": -0.1, "b_output": 0.3,
        }
        token_rows = np.arange(12, dtype=np.float64) * 0.1 - 0.4
        params = TADistMultParams(
            entity_emb=_tensor([[0.7], [-0.2]]),
            token_emb=ParamTensor(token_rows.reshape(-1, 1).copy()),
            **{k: _tensor([[v]]) if k[0] in "wu" else ParamTensor(np.array([v])) for k, v in weights.items()},
            n_relations=2,
        )
        vocab = _vocab(2, 2, [1879, 1900])
        tokens = ta_tokenize(1, 0, vocab)
        assert tokens.tolist() == [1, 2 + 1, 2 + 8, 2 + 7, 2 + 9]

        def sig(z):
            return 1.0 / (1.0 + np.exp(-z))

        h = c = 0.0
        for tok in tokens:
            x = token_rows[tok]
            i = sig(weights["w_input"] * x + weights["u_input"] * h + weights["b_input"])
            f = sig(weights["w_forget"] * x + weights["u_forget"] * h + weights["b_forget"])
            g = np.tanh(weights["w_cell"] * x + weights["u_cell"] * h + weights["b_cell"])
            o = sig(weights["w_output"] * x + weights["u_output"] * h + weights["b_output"])
            c = f * c + i * g
            h = o * np.tanh(c)

        got, cache = lstm_forward(tokens, params)
        assert got.shape == (1,)
        assert got[0] == pytest.approx(h, abs=1e-10)
        assert cache.x.shape == (5, 1)
        assert cache.c[-1][0] == pytest.approx(c, abs=1e-10)

    def test_rejects_empty_sequence(self):
        params = init_params("tadistmult", 3, 2, 2, 2, seed=0)
        with pytest.raises(ValueError):
            lstm_forward(np.array([], dtype=np.int64), params)

    def test_backward_matches_finite_differences(self):
        params = init_params("tadistmult", 3, 4, 2, 2, seed=21, dtype=np.float64)
        vocab = _vocab(4, 2, [1905, 1960])
        tokens = ta_tokenize(1, 1, vocab)
        dh = np.array([0.3, -1.1, 0.7])

        def loss():
            h, _ = lstm_forward(tokens, params)
            return float(h @ dh)

        _, cache = lstm_forward(tokens, params)
        dx, dense = lstm_backward(params, cache, dh)
        arrays = {name: t.values for name, t in params.tables().items() if name != "entity_emb"}
        grads = dict(dense)
        token_grad = np.zeros_like(params.token_emb.values)
        np.add.at(token_grad, cache.tokens, dx)
        grads["token_emb"] = token_grad
        err = finite_diff_check(loss, arrays, grads)
        assert err < 1e-6


class TestTADistMultScore:
    def test_trilinear_worked_example(self):
        s = np.array([1.0, 1.0])
        o = np.array([1.0, 1.0])
        pseq = np.array([2.0, 3.0])
        assert trilinear_score(s, o, pseq) == 5.0

    def test_zero_sequence_means_zero_score(self):
        params = _zeroed_lstm(init_params("tadistmult", 4, 5, 2, 2, seed=1, dtype=np.float64))
        vocab = _vocab(5, 2, [1900, 1910])
        for quad in [(0, 0, 1, 0), (2, 1, 4, 1), (3, 0, 3, 0)]:
            assert score_quadruple(params, quad, vocab) == 0.0

    def test_subject_object_symmetry(self):
        params = init_params("tadistmult", 4, 6, 2, 3, seed=4, dtype=np.float64)
        vocab = _vocab(6, 2, [1900, 1905, 1910])
        for quad in [(0, 1, 3, 2), (5, 0, 1, 0), (2, 1, 2, 1)]:
            s, p, o, t = quad
            assert score_quadruple(params, quad, vocab) == score_quadruple(params, (o, p, s, t), vocab)

    def test_matches_manual_trilinear(self, rng):
        params = init_params("tadistmult", 3, 5, 2, 2, seed=6, dtype=np.float64)
        vocab = _vocab(5, 2, [1900, 1910])
        for _ in range(10):
            s, p, o, t = (
                int(rng.integers(5)),
                int(rng.integers(2)),
                int(rng.integers(5)),
                int(rng.integers(2)),
            )
            pseq, _ = lstm_forward(ta_tokenize(p, t, vocab), params)
            want = float(np.sum(params.entity_emb.values[s] * params.entity_emb.values[o] * pseq))
            assert score_quadruple(params, (s, p, o, t), vocab) == pytest.approx(want, abs=1e-12)


class TestCandidateScoring:
    @pytest.mark.parametrize("backbone", ["ttranse", "tadistmult"])
    @pytest.mark.parametrize("slot", ["object", "subject"])
    def test_candidate_list_matches_pointwise(self, backbone, slot):
        params = init_params(backbone, 4, 7, 3, 2, seed=2, dtype=np.float64)
        vocab = _vocab(7, 3, [1900, 1950])
        query = (2, 1, 5, 1)
        cs = build_candidates(query, slot, vocab)
        got = score_candidates(params, cs, vocab)
        for pos, cand in enumerate(cs.candidates):
            s, p, o, t = query
            quad = (s, p, int(cand), t) if slot == "object" else (int(cand), p, o, t)
            assert got[pos] == pytest.approx(score_quadruple(params, quad, vocab), abs=1e-9)

    @pytest.mark.parametrize("backbone", ["ttranse", "tadistmult"])
    @pytest.mark.parametrize("slot", ["object", "subject"])
    def test_batch_matches_pointwise(self, backbone, slot, rng):
        params = init_params(backbone, 3, 6, 2, 2, seed=13, dtype=np.float64)
        vocab = _vocab(6, 2, [1900, 1910])
        quads = np.stack(
            [
                rng.integers(6, size=5),
                rng.integers(2, size=5),
                rng.integers(6, size=5),
                rng.integers(2, size=5),
            ],
            axis=1,
        )
        scores = batch_candidate_scores(params, vocab, quads, slot)
        assert scores.shape == (5, 6)
        for row, (s, p, o, t) in enumerate(quads):
            for j in range(6):
                quad = (s, p, j, t) if slot == "object" else (j, p, o, t)
                assert scores[row, j] == pytest.approx(
                    score_quadruple(params, quad, vocab), abs=1e-9
                )

    def test_float32_close_to_float64(self):
        params32 = init_params("ttranse", 8, 12, 3, 3, seed=5)
        params64 = params32.astype(np.float64)
        vocab = _vocab(12, 3, [1900, 1910, 1920])
        quads = np.array([[0, 0, 1, 0], [4, 2, 9, 2], [11, 1, 3, 1]])
        s32 = batch_candidate_scores(params32, vocab, quads, "object")
        s64 = batch_candidate_scores(params64, vocab, quads, "object")
        assert np.max(np.abs(s32.astype(np.float64) - s64)) < 1e-5


class TestGradAccum:
    def test_row_gradients_accumulate(self):
        params = init_params("ttranse", 2, 4, 2, 2, seed=0, dtype=np.float64)
        grads = GradAccum(params)
        grads.add_rows("entity_emb", np.array([1, 1, 3]), np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]))
        rows, vals = grads.sparse("entity_emb")
        assert rows.tolist() == [1, 3]
        assert np.array_equal(vals, np.array([[3.0, 0.0], [0.0, 1.0]]))

    def test_untouched_rows_not_updated_by_apply(self):
        params = init_params("ttranse", 2, 4, 2, 2, seed=0, dtype=np.float64)
        before = params.entity_emb.values.copy()
        grads = GradAccum(params)
        grads.add_rows("entity_emb", np.array([2]), np.array([[1.0, -1.0]]))
        grads.apply(lr=0.1, eps=1e-8)
        changed = np.any(params.entity_emb.values != before, axis=1)
        assert changed.tolist() == [False, False, True, False]

    def test_dense_dict_full_shapes(self):
        params = init_params("tadistmult", 3, 4, 2, 2, seed=0, dtype=np.float64)
        grads = GradAccum(params)
        grads.add_dense("w_input", np.ones((3, 3)))
        out = grads.dense_dict()
        assert set(out) == set(params.tables())
        assert np.array_equal(out["w_input"], np.ones((3, 3)))
        assert np.all(out["entity_emb"] == 0.0)

    def test_scale(self):
        params = init_params("ttranse", 2, 3, 1, 1, seed=0, dtype=np.float64)
        grads = GradAccum(params)
        grads.add_rows("entity_emb", np.array([0]), np.array([[2.0, 4.0]]))
        grads.scale(0.5)
        _, vals = grads.sparse("entity_emb")
        assert np.array_equal(vals, np.array([[1.0, 2.0]]))


class TestSupervisedGradients:
    def test_zero_distance_positive_contributes_nothing(self):
        # the positive sits exactly at distance zero; its subgradient is taken
        # as zero, so only the active negative moves anything
        params = TTransEParams(
            entity_emb=_tensor([[0.0, 0.0], [0.3, 0.4]]),
            relation_emb=_tensor([[0.0, 0.0]]),
            time_emb=_tensor([[0.0, 0.0]]),
        )
        vocab = _vocab(2, 1, [1900])
        pos = np.array([[0, 0, 0, 0]])
        neg = np.array([[[0, 0, 1, 0]]])
        loss, grads = supervised_gradients(params, vocab, pos, neg, margin=1.0)
        # slack = 1 + 0 - 0.5
        assert loss == pytest.approx(0.5, abs=1e-12)
        dense = grads.dense_dict()
        # u_neg = (-0.6, -0.8); subject/relation/time rows get -u_neg, object +u_neg
        assert np.allclose(dense["entity_emb"][0], [0.6, 0.8], atol=1e-12)
        assert np.allclose(dense["entity_emb"][1], [-0.6, -0.8], atol=1e-12)
        assert np.allclose(dense["relation_emb"][0], [0.6, 0.8], atol=1e-12)
        assert np.allclose(dense["time_emb"][0], [0.6, 0.8], atol=1e-12)

    def test_satisfied_margin_is_flat(self):
        params = TTransEParams(
            entity_emb=_tensor([[0.0, 0.0], [30.0, 40.0]]),
            relation_emb=_tensor([[0.0, 0.0]]),
            time_emb=_tensor([[0.0, 0.0]]),
        )
        vocab = _vocab(2, 1, [1900])
        loss, grads = supervised_gradients(
            params, vocab, np.array([[0, 0, 0, 0]]), np.array([[[0, 0, 1, 0]]])
        )
        assert loss == 0.0
        assert all(np.all(g == 0.0) for g in grads.dense_dict().values())

    def test_rejects_bad_negative_shape(self):
        params = init_params("ttranse", 2, 3, 1, 1, seed=0)
        vocab = _vocab(3, 1, [1900])
        with pytest.raises(ValueError):
            supervised_gradients(params, vocab, np.zeros((2, 4), dtype=np.int64), np.zeros((3, 1, 4), dtype=np.int64))

    def test_margin_loss_gradients_ttranse(self, rng):
        params = init_params("ttranse", 2, 5, 2, 3, seed=3, dtype=np.float64)
        vocab = _vocab(5, 2, [1900, 1910, 1920])
        pos = np.stack(
            [rng.integers(5, size=3), rng.integers(2, size=3), rng.integers(5, size=3), rng.integers(3, size=3)],
            axis=1,
        )
        neg = np.stack(
            [rng.integers(5, size=(3, 2)), rng.integers(2, size=(3, 2)), rng.integers(5, size=(3, 2)), rng.integers(3, size=(3, 2))],
            axis=2,
        )

        def loss():
            return supervised_gradients(params, vocab, pos, neg)[0]

        _, grads = supervised_gradients(params, vocab, pos, neg)
        arrays = {name: t.values for name, t in params.tables().items()}
        err = finite_diff_check(loss, arrays, grads.dense_dict())
        assert err < 1e-4

    def test_logistic_loss_gradients_tadistmult(self, rng):
        params = init_params("tadistmult", 3, 4, 2, 2, seed=5, dtype=np.float64)
        vocab = _vocab(4, 2, [1900, 1950])
        pos = np.stack(
            [rng.integers(4, size=2), rng.integers(2, size=2), rng.integers(4, size=2), rng.integers(2, size=2)],
            axis=1,
        )
        neg = np.stack(
            [rng.integers(4, size=(2, 2)), rng.integers(2, size=(2, 2)), rng.integers(4, size=(2, 2)), rng.integers(2, size=(2, 2))],
            axis=2,
        )

        def loss():
            return supervised_gradients(params, vocab, pos, neg)[0]

        _, grads = supervised_gradients(params, vocab, pos, neg)
        arrays = {name: t.values for name, t in params.tables().items()}
        err = finite_diff_check(loss, arrays, grads.dense_dict())
        assert err < 1e-4


class TestBatchBackprop:
    @pytest.mark.parametrize("backbone", ["ttranse", "tadistmult"])
    @pytest.mark.parametrize("slot", ["object", "subject"])
    def test_matches_finite_differences(self, backbone, slot, rng):
        params = init_params(backbone, 3, 5, 2, 2, seed=17, dtype=np.float64)
        vocab = _vocab(5, 2, [1900, 1910])
        quads = np.stack(
            [rng.integers(5, size=4), rng.integers(2, size=4), rng.integers(5, size=4), rng.integers(2, size=4)],
            axis=1,
        )
        weights = np.random.default_rng(99).normal(size=(4, 5))

        def loss():
            return float(np.sum(weights * batch_candidate_scores(params, vocab, quads, slot)))

        grads = GradAccum(params)
        batch_candidate_backprop(params, vocab, quads, slot, weights, grads)
        arrays = {name: t.values for name, t in params.tables().items()}
        err = finite_diff_check(loss, arrays, grads.dense_dict(), rng=rng)
        assert err < 1e-4
