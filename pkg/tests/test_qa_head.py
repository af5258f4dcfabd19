"""Bi-LSTM residual layer, window position heads, loss, span decoding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from disaqa import tensor as T
from disaqa.qa_head import (
    BiLSTMWeights, PositionHead, PositionHeadWeights, SpanPrediction,
    bilstm_encode, decode_span, position_logits, qa_loss, qa_loss_batch,
)


def random_bilstm(d_model, seed=0):
    return BiLSTMWeights.init(d_model, seed=seed, zero_init=False)


def random_heads(d_model, seed=0, end_weight=3.0):
    return PositionHeadWeights.init(d_model, seed=seed,
                                    end_weight=end_weight)


def brute_decode(start_logits, end_logits, context_range, max_answer_len):
    """Exhaustive (s, e) search in lexicographic order, strict improvement."""
    lo, hi = context_range
    s = np.asarray(start_logits, dtype=float)[lo:hi]
    e = np.asarray(end_logits, dtype=float)[lo:hi]
    ls = s - logsumexp(s)
    le = e - logsumexp(e)
    best = None
    for i in range(hi - lo):
        for j in range(i, min(i + max_answer_len, hi - lo)):
            score = ls[i] + le[j]
            if best is None or score > best[2]:
                best = (lo + i, lo + j, score)
    return best


class TestBiLSTM:
    def test_zero_init_exact_identity(self):
        d = 8
        w = BiLSTMWeights.init(d, seed=0, zero_init=True)
        h = T.Tensor(np.random.default_rng(1).normal(size=(5, d)))
        out = bilstm_encode(h, w)
        assert out.data.tobytes() == h.data.tobytes()

    def test_output_shape(self):
        d = 6
        w = random_bilstm(d)
        assert bilstm_encode(T.Tensor(np.zeros((4, d))), w).shape == (4, d)
        batched = bilstm_encode(T.Tensor(np.zeros((3, 4, d))), w)
        assert batched.shape == (3, 4, d)

    def test_reversed_input_swaps_direction_halves(self):
        # With both direction cells sharing one weight set, running the
        # sequence backwards must swap and reverse the concat halves.
        d = 8
        dh = d // 2
        w = random_bilstm(d, seed=2)
        w.bwd.wx.data[...] = w.fwd.wx.data
        w.bwd.wh.data[...] = w.fwd.wh.data
        w.bwd.bias.data[...] = w.fwd.bias.data
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, d))
        fwd = bilstm_encode(T.Tensor(x), w).data - x
        rev_in = x[::-1].copy()
        rev = bilstm_encode(T.Tensor(rev_in), w).data - rev_in
        flipped = rev[::-1]
        np.testing.assert_allclose(flipped[:, :dh], fwd[:, dh:], atol=1e-12)
        np.testing.assert_allclose(flipped[:, dh:], fwd[:, :dh], atol=1e-12)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError, match="even"):
            BiLSTMWeights.init(7, seed=0)

    def test_single_step(self):
        d = 4
        w = random_bilstm(d, seed=4)
        h = T.Tensor(np.random.default_rng(5).normal(size=(1, d)))
        out = bilstm_encode(h, w)
        assert out.shape == (1, d)
        assert np.isfinite(out.data).all()

    def test_length_aware_batch_matches_per_sequence(self):
        # Rows padded to a common length must reproduce the tight result
        # on their real positions.
        d = 6
        w = random_bilstm(d, seed=6)
        rng = np.random.default_rng(7)
        rows = [rng.normal(size=(3, d)), rng.normal(size=(5, d))]
        padded = np.zeros((2, 5, d))
        padded[0, :3] = rows[0]
        padded[1] = rows[1]
        lengths = np.array([3, 5])
        batch_out = bilstm_encode(T.Tensor(padded), w, lengths=lengths).data
        for i, row in enumerate(rows):
            solo = bilstm_encode(T.Tensor(row), w).data
            np.testing.assert_allclose(batch_out[i, :len(row)], solo,
                                       atol=1e-10)


class TestPositionLogits:
    def test_shapes_and_finite_at_l1(self):
        d = 6
        heads = random_heads(d)
        h = T.Tensor(np.random.default_rng(0).normal(size=(1, d)))
        s, e = position_logits(h, heads)
        assert s.shape == (1,) and e.shape == (1,)
        assert np.isfinite(s.data).all() and np.isfinite(e.data).all()

    def test_identical_rows_give_equal_interior_logits(self):
        d = 6
        heads = random_heads(d, seed=1)
        row = np.random.default_rng(2).normal(size=d)
        h = T.Tensor(np.tile(row, (5, 1)))
        s, e = position_logits(h, heads)
        # Positions 1..3 see the full (prev, self, next) window.
        np.testing.assert_allclose(s.data[1:4], s.data[1], atol=1e-12)
        np.testing.assert_allclose(e.data[1:4], e.data[1], atol=1e-12)

    def test_zero_weights_yield_bias_only(self):
        d = 4
        head = PositionHead.init(d, rng=np.random.default_rng(0),
                                 zero_init=True)
        head.b2.data[...] = 0.7
        heads = PositionHeadWeights(start=head,
                                    end=PositionHead.init(
                                        d, rng=np.random.default_rng(1),
                                        zero_init=True),
                                    end_weight=3.0)
        s, e = position_logits(T.Tensor(np.ones((6, d))), heads)
        np.testing.assert_array_equal(s.data, np.full(6, 0.7))
        np.testing.assert_array_equal(e.data, np.zeros(6))

    def test_start_and_end_paths_independent(self):
        d = 4
        heads = random_heads(d, seed=3)
        h = T.Tensor(np.random.default_rng(4).normal(size=(5, d)))
        s1, _ = position_logits(h, heads)
        heads.end.w2.data[...] += 1.0
        s2, e2 = position_logits(h, heads)
        assert s1.data.tobytes() == s2.data.tobytes()
        assert np.isfinite(e2.data).all()


class TestQALoss:
    def test_uniform_logits_hand_value(self):
        s = T.Tensor(np.zeros(10))
        e = T.Tensor(np.zeros(10))
        loss = qa_loss(s, e, true_start=2, true_end=4, alpha=3.0)
        assert abs(loss.item() - 4 * np.log(10)) < 1e-12

    def test_peaked_logits_near_zero(self):
        s = np.zeros(10)
        e = np.zeros(10)
        s[3] = 1e4
        e[5] = 1e4
        loss = qa_loss(T.Tensor(s), T.Tensor(e), 3, 5, alpha=3.0)
        assert loss.item() < 1e-8

    def test_alpha_one_is_symmetric(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=8)
        b = rng.normal(size=8)
        one = qa_loss(T.Tensor(a), T.Tensor(b), 1, 6, alpha=1.0).item()
        two = qa_loss(T.Tensor(b), T.Tensor(a), 6, 1, alpha=1.0).item()
        assert abs(one - two) < 1e-12

    def test_alpha_scales_end_term(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=8)
        b = rng.normal(size=8)
        base = qa_loss(T.Tensor(a), T.Tensor(b), 2, 3, alpha=1.0).item()
        start_only = qa_loss(T.Tensor(a), T.Tensor(np.zeros(8)), 2, 3,
                             alpha=1.0).item() - np.log(8)
        heavy = qa_loss(T.Tensor(a), T.Tensor(b), 2, 3, alpha=3.0).item()
        end_term = base - start_only
        assert abs(heavy - (start_only + 3.0 * end_term)) < 1e-10

    def test_out_of_zone_truth_rejected(self):
        s = T.Tensor(np.zeros(10))
        e = T.Tensor(np.zeros(10))
        with pytest.raises(IndexError, match="zone"):
            qa_loss(s, e, 1, 5, alpha=3.0, context_range=(3, 9))
        with pytest.raises(IndexError, match="zone"):
            qa_loss(s, e, 4, 9, alpha=3.0, context_range=(3, 9))

    def test_nonpositive_alpha_rejected(self):
        s = T.Tensor(np.zeros(4))
        with pytest.raises(ValueError, match="alpha"):
            qa_loss(s, s, 0, 1, alpha=0.0)

    def test_zone_restriction_changes_normalization(self):
        rng = np.random.default_rng(2)
        s = T.Tensor(rng.normal(size=10))
        e = T.Tensor(rng.normal(size=10))
        free = qa_loss(s, e, 4, 5, alpha=1.0).item()
        zoned = qa_loss(s, e, 4, 5, alpha=1.0, context_range=(3, 9)).item()
        assert zoned < free  # fewer competitors, higher true probability

    def test_increasing_true_end_logit_never_increases_loss(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            s = rng.normal(size=12)
            e = rng.normal(size=12)
            te = int(rng.integers(0, 12))
            base = qa_loss(T.Tensor(s), T.Tensor(e), 0, te, alpha=3.0).item()
            bumped = e.copy()
            bumped[te] += rng.uniform(0.0, 2.0)
            after = qa_loss(T.Tensor(s), T.Tensor(bumped), 0, te,
                            alpha=3.0).item()
            assert after <= base + 1e-12


class TestDecodeSpan:
    def test_clear_peaks(self):
        s = np.zeros(8)
        e = np.zeros(8)
        s[3] = 10.0
        e[5] = 10.0
        pred = decode_span(s, e, context_range=(1, 8))
        assert (pred.start, pred.end) == (3, 5)

    def test_end_peak_before_start_peak_matches_oracle(self):
        s = np.zeros(10)
        e = np.zeros(10)
        s[7] = 5.0
        e[2] = 5.0
        cr = (1, 10)
        pred = decode_span(s, e, cr, max_answer_len=4)
        bs, be, _ = brute_decode(s, e, cr, 4)
        assert (pred.start, pred.end) == (bs, be)

    def test_long_best_span_falls_back_to_oracle_choice(self):
        s = np.zeros(12)
        e = np.zeros(12)
        s[2] = 8.0
        e[11] = 8.0  # gap 9 exceeds the cap below
        cr = (1, 12)
        pred = decode_span(s, e, cr, max_answer_len=3)
        bs, be, _ = brute_decode(s, e, cr, 3)
        assert (pred.start, pred.end) == (bs, be)
        assert pred.end - pred.start < 3

    def test_all_equal_logits_tie_break(self):
        s = np.zeros(9)
        e = np.zeros(9)
        pred = decode_span(s, e, context_range=(2, 9))
        assert (pred.start, pred.end) == (2, 2)

    def test_score_is_joint_zone_log_probability(self):
        rng = np.random.default_rng(4)
        s = rng.normal(size=10)
        e = rng.normal(size=10)
        cr = (2, 9)
        pred = decode_span(s, e, cr, max_answer_len=5)
        _, _, brute_score = brute_decode(s, e, cr, 5)
        assert abs(pred.score - brute_score) < 1e-10

    def test_prediction_outside_zone_impossible(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            s = rng.normal(size=16) * 5
            e = rng.normal(size=16) * 5
            pred = decode_span(s, e, (4, 12), max_answer_len=6)
            assert 4 <= pred.start <= pred.end < 12
            assert pred.end - pred.start < 6

    def test_empty_range_rejected(self):
        with pytest.raises(ValueError, match="range"):
            decode_span(np.zeros(5), np.zeros(5), (3, 3))

    def test_invalid_max_len_rejected(self):
        with pytest.raises(ValueError, match="max_answer_len"):
            decode_span(np.zeros(5), np.zeros(5), (0, 5), max_answer_len=0)

    @settings(max_examples=120, deadline=None)
    @given(st.data())
    def test_matches_exhaustive_oracle(self, data):
        l = data.draw(st.integers(2, 64), label="L")
        lo = data.draw(st.integers(0, l - 1), label="lo")
        hi = data.draw(st.integers(lo + 1, l), label="hi")
        cap = data.draw(st.integers(1, 8), label="cap")
        seed = data.draw(st.integers(0, 2**32 - 1), label="seed")
        rng = np.random.default_rng(seed)
        s = rng.normal(size=l) * 3
        e = rng.normal(size=l) * 3
        pred = decode_span(s, e, (lo, hi), max_answer_len=cap)
        bs, be, bscore = brute_decode(s, e, (lo, hi), cap)
        assert (pred.start, pred.end) == (bs, be)
        assert abs(pred.score - bscore) < 1e-9


class TestSpanPrediction:
    def test_ordering_invariant(self):
        with pytest.raises(ValueError, match="start"):
            SpanPrediction(start=5, end=3, score=0.0)

    def test_valid_span(self):
        p = SpanPrediction(start=3, end=3, score=-1.5)
        assert p.start == p.end == 3


class TestBatchLoss:
    def test_batch_mean_matches_singles(self):
        rng = np.random.default_rng(6)
        l = 9
        s = rng.normal(size=(3, l))
        e = rng.normal(size=(3, l))
        starts = np.array([2, 3, 4])
        ends = np.array([4, 3, 7])
        ranges = [(1, l)] * 3
        batch = qa_loss_batch(T.Tensor(s), T.Tensor(e), starts, ends,
                              ranges, alpha=2.0).item()
        singles = [
            qa_loss(T.Tensor(s[i]), T.Tensor(e[i]), int(starts[i]),
                    int(ends[i]), alpha=2.0, context_range=ranges[i]).item()
            for i in range(3)
        ]
        assert abs(batch - float(np.mean(singles))) < 1e-10

    def test_batch_rejects_out_of_zone_row(self):
        s = T.Tensor(np.zeros((2, 8)))
        with pytest.raises(IndexError, match="zone"):
            qa_loss_batch(s, s, np.array([2, 0]), np.array([3, 3]),
                          [(1, 8), (1, 8)], alpha=1.0)


class TestEndToEndGradients:
    def test_bilstm_and_heads_gradient_check(self):
        d = 6
        l = 4
        w = random_bilstm(d, seed=8)
        heads = random_heads(d, seed=9)
        h_bert = np.random.default_rng(10).normal(size=(l, d))

        def loss():
            hidden = bilstm_encode(T.Tensor(h_bert), w)
            s, e = position_logits(hidden, heads)
            return qa_loss(s, e, 1, 2, alpha=3.0, context_range=(1, l))

        params = dict(w.named_params("bilstm"))
        params.update(heads.named_params("head"))
        report = T.grad_check(loss, params, eps=1e-5,
                              max_entries_per_param=8)
        assert report.max_rel_error < 1e-4, \
            f"worst {report.worst_param}: {report.max_rel_error:.2e}"
