"""Tensor core: forward oracles, gradient checks, dropout semantics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disaqa import tensor as T


def project_to_scalar(out, seed=0):
    """Reduce an op output to a scalar with a fixed random projection.

    A plain sum can hide sign errors that cancel; a random projection makes
    the finite-difference comparison sensitive to every entry.
    """
    r = np.random.default_rng(seed).normal(size=out.shape)
    return T.mul(out, T.Tensor(r)).sum()


def check_op(build_loss, params, tol=1e-4, eps=1e-5):
    report = T.grad_check(build_loss, params, eps=eps)
    assert report.max_rel_error < tol, (
        f"worst {report.worst_param}: {report.max_rel_error:.3e}"
    )


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_hand_product(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_zeros_annihilate(self):
        out = T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.ones((3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=(3, 4, 5))
        out = T.matmul(T.Tensor(a), T.Tensor(b)).data
        for i in range(3):
            np.testing.assert_allclose(out[i], a[i] @ b[i], atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_inputs_stay_finite(self):
        out = T.softmax(T.Tensor([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_log_k_proportionality(self):
        x = T.Tensor([math.log(1), math.log(2), math.log(3)])
        np.testing.assert_allclose(T.softmax(x).data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_empty_axis_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            T.softmax(T.Tensor(np.zeros((3, 0))))

    def test_extreme_magnitudes(self):
        out = T.softmax(T.Tensor([1e4, -1e4, 0.0])).data
        assert np.isfinite(out).all()
        assert abs(out.sum() - 1.0) < 1e-9

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_sums_to_one(self, xs):
        out = T.softmax(T.Tensor(np.array(xs))).data
        assert abs(out.sum() - 1.0) <= 1e-9


class TestLayerNorm:
    def test_constant_row_zeroes(self):
        x = T.Tensor([[3.0, 3.0, 3.0]])
        out = T.layer_norm(x, T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.zeros((1, 3)), atol=1e-12)

    def test_two_point_row(self):
        out = T.layer_norm(T.Tensor([1.0, -1.0]), T.Tensor(np.ones(2)),
                           T.Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-6)

    def test_zero_gamma_gives_beta(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.normal(size=(4, 6)))
        beta = rng.normal(size=6)
        out = T.layer_norm(x, T.Tensor(np.zeros(6)), T.Tensor(beta))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (4, 6)), atol=1e-12)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError, match="eps"):
            T.layer_norm(T.Tensor([1.0, 2.0]), T.Tensor(np.ones(2)),
                         T.Tensor(np.zeros(2)), eps=0.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25)
    def test_row_mean_near_zero(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=rng.uniform(0.1, 10.0), size=(3, 8))
        out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(8)), T.Tensor(np.zeros(8)))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-7


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.cross_entropy(T.Tensor(np.zeros(4)), 2)
        assert abs(loss.item() - math.log(4)) < 1e-12

    def test_peaked_target(self):
        loss = T.cross_entropy(T.Tensor([1e4, 0.0, 0.0]), 0)
        assert loss.item() < 1e-9

    def test_hand_two_logit(self):
        loss = T.cross_entropy(T.Tensor([0.0, math.log(3)]), 0)
        assert abs(loss.item() - math.log(4)) < 1e-12

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(T.Tensor([0.0, 1.0]), 2)
        with pytest.raises(IndexError):
            T.cross_entropy(T.Tensor([0.0, 1.0]), -1)

    def test_rows_match_vector_form(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(4, 7))
        targets = np.array([0, 3, 6, 2])
        rows = T.cross_entropy_rows(T.Tensor(logits), targets).data
        for i in range(4):
            single = T.cross_entropy(T.Tensor(logits[i]), int(targets[i])).item()
            assert abs(rows[i] - single) < 1e-12


class TestGradCheck:
    def test_quadratic_is_exact(self):
        x = T.Tensor(np.array([3.0]), requires_grad=True)
        report = T.grad_check(lambda: T.mul(x, x).sum(), {"x": x})
        assert report.max_rel_error < 1e-8

    def test_softmax_cross_entropy(self):
        logits = T.Tensor(np.random.default_rng(0).normal(size=5), requires_grad=True)
        report = T.grad_check(lambda: T.cross_entropy(logits, 3), {"logits": logits})
        assert report.max_rel_error < 1e-4

    def test_frozen_param_reports_zero(self):
        x = T.Tensor(np.array([2.0]), requires_grad=True)
        w = T.Tensor(np.array([5.0]), requires_grad=False)
        report = T.grad_check(lambda: T.mul(x, w).sum(), {"x": x, "w": w})
        assert report.per_param["w"] == 0.0
        assert w.grad is None

    def test_nonfinite_loss_rejected(self):
        x = T.Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(FloatingPointError):
            T.grad_check(lambda: T.Tensor(np.array([np.inf])).sum() + x.sum(), {"x": x})

    def test_eps_range_enforced(self):
        x = T.Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError):
            T.grad_check(lambda: x.sum(), {"x": x}, eps=1e-2)

    def test_report_consistency(self):
        x = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        report = T.grad_check(lambda: T.tanh(x).sum(), {"x": x})
        assert report.max_rel_error == max(report.per_param.values())
        assert report.worst_param in report.per_param


def _rand(shape, seed, scale=1.0):
    return T.Tensor(np.random.default_rng(seed).normal(scale=scale, size=shape),
                    requires_grad=True)


class TestOpGradients:
    """Randomized FD checks, one per differentiable op."""

    def test_add_broadcast(self):
        a, b = _rand((3, 4), 0), _rand((4,), 1)
        check_op(lambda: project_to_scalar(T.add(a, b)), {"a": a, "b": b})

    def test_mul_broadcast(self):
        a, b = _rand((2, 3, 4), 0), _rand((3, 1), 1)
        check_op(lambda: project_to_scalar(T.mul(a, b)), {"a": a, "b": b})

    def test_matmul(self):
        a, b = _rand((3, 4), 0), _rand((4, 2), 1)
        check_op(lambda: project_to_scalar(T.matmul(a, b)), {"a": a, "b": b})

    def test_matmul_batched_broadcast(self):
        a, b = _rand((2, 3, 4), 0), _rand((4, 5), 1)
        check_op(lambda: project_to_scalar(T.matmul(a, b)), {"a": a, "b": b})

    def test_tanh(self):
        x = _rand((3, 3), 0)
        check_op(lambda: project_to_scalar(T.tanh(x)), {"x": x})

    def test_sigmoid(self):
        x = _rand((3, 3), 0)
        check_op(lambda: project_to_scalar(T.sigmoid(x)), {"x": x})

    def test_gelu(self):
        x = _rand((3, 3), 0)
        check_op(lambda: project_to_scalar(T.gelu(x)), {"x": x})

    def test_softmax(self):
        x = _rand((3, 5), 0)
        check_op(lambda: project_to_scalar(T.softmax(x)), {"x": x})

    def test_layer_norm(self):
        x, g, b = _rand((4, 6), 0), _rand((6,), 1), _rand((6,), 2)
        check_op(lambda: project_to_scalar(T.layer_norm(x, g, b)),
                 {"x": x, "gamma": g, "beta": b})

    def test_cross_entropy_rows(self):
        x = _rand((3, 6), 0)
        targets = np.array([1, 5, 0])
        check_op(lambda: T.cross_entropy_rows(x, targets).sum(), {"x": x})

    def test_embedding(self):
        table = _rand((7, 4), 0)
        ids = np.array([[0, 3, 3], [6, 1, 0]])
        check_op(lambda: project_to_scalar(T.embedding(table, ids)), {"table": table})

    def test_concat(self):
        a, b = _rand((2, 3), 0), _rand((2, 5), 1)
        check_op(lambda: project_to_scalar(T.concat([a, b], axis=1)), {"a": a, "b": b})

    def test_getitem_slice(self):
        x = _rand((4, 6), 0)
        check_op(lambda: project_to_scalar(x[1:3, ::2]), {"x": x})

    def test_getitem_int_row(self):
        x = _rand((4, 6), 0)
        check_op(lambda: project_to_scalar(x[:, 2]), {"x": x})

    def test_gather_time(self):
        x = _rand((2, 4, 3), 0)
        idx = np.array([[3, 2, 1, 0], [1, 0, 2, 3]])
        check_op(lambda: project_to_scalar(T.gather_time(x, idx)), {"x": x})

    def test_reshape_swapaxes_sum(self):
        x = _rand((2, 3, 4), 0)

        def loss():
            y = T.swapaxes(x.reshape(6, 4), 0, 1)
            return project_to_scalar(y.sum(axis=1))

        check_op(loss, {"x": x})

    def test_linear(self):
        x, w, b = _rand((5, 3), 0), _rand((3, 2), 1), _rand((2,), 2)
        check_op(lambda: project_to_scalar(T.linear(x, w, b)),
                 {"x": x, "w": w, "b": b})

    def test_lstm_cell_update(self):
        z, c = _rand((3, 8), 0), _rand((3, 2), 1)
        check_op(lambda: project_to_scalar(T.lstm_cell_update(z, c, 2)),
                 {"z": z, "c": c})

    def test_lstm_hidden(self):
        z, c = _rand((3, 8), 0), _rand((3, 2), 1)
        check_op(lambda: project_to_scalar(T.lstm_hidden(z, c, 2)),
                 {"z": z, "c": c})

    def test_lstm_ops_match_composed_primitives(self):
        # The fused ops must agree with the op-by-op recurrence exactly.
        rng = np.random.default_rng(5)
        z = T.Tensor(rng.normal(size=(4, 12)))
        c_prev = T.Tensor(rng.normal(size=(4, 3)))
        dh = 3
        i = T.sigmoid(z[:, :dh])
        f = T.sigmoid(z[:, dh:2 * dh])
        g = T.tanh(z[:, 2 * dh:3 * dh])
        o = T.sigmoid(z[:, 3 * dh:])
        c_ref = T.add(T.mul(f, c_prev), T.mul(i, g))
        h_ref = T.mul(o, T.tanh(c_ref))
        c_fused = T.lstm_cell_update(z, c_prev, dh)
        h_fused = T.lstm_hidden(z, c_fused, dh)
        np.testing.assert_allclose(c_fused.data, c_ref.data, atol=1e-15)
        np.testing.assert_allclose(h_fused.data, h_ref.data, atol=1e-15)


class TestDropout:
    def test_rate_zero_identity(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3))
        out = T.dropout(x, 0.0, np.random.default_rng(0), train=True)
        assert out is x

    def test_eval_identity_any_rate(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3))
        out = T.dropout(x, 0.9, None, train=False)
        assert out is x

    def test_inverted_scaling(self):
        x = T.Tensor(np.ones((100, 100)))
        out = T.dropout(x, 0.25, np.random.default_rng(0), train=True).data
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        # Keep fraction concentrates near 1 - rate.
        assert abs((out != 0).mean() - 0.75) < 0.02

    def test_seed_determinism(self):
        x = T.Tensor(np.ones((8, 8)))
        a = T.dropout(x, 0.5, np.random.default_rng(7), train=True).data
        b = T.dropout(x, 0.5, np.random.default_rng(7), train=True).data
        np.testing.assert_array_equal(a, b)

    def test_invalid_rate(self):
        x = T.Tensor(np.ones(3))
        with pytest.raises(ValueError):
            T.dropout(x, 1.0, np.random.default_rng(0), train=True)
        with pytest.raises(ValueError):
            T.dropout(x, -0.1, np.random.default_rng(0), train=True)

    def test_gradient_masks_match_forward(self):
        x = _rand((6, 6), 0)
        out = T.dropout(x, 0.5, np.random.default_rng(3), train=True)
        out.sum().backward()
        # Gradient is the same scaled mask the forward pass applied.
        np.testing.assert_array_equal((x.grad != 0), (out.data != 0))


class TestTapeMechanics:
    def test_backward_needs_scalar(self):
        x = _rand((2, 2), 0)
        with pytest.raises(ValueError):
            T.mul(x, x).backward()

    def test_no_grad_suspends_recording(self):
        x = _rand((2, 2), 0)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad and y._parents == ()

    def test_grad_accumulates_across_backwards(self):
        x = T.Tensor(np.array([2.0]), requires_grad=True)
        T.mul(x, x).sum().backward()
        T.mul(x, x).sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_reused_node_gets_both_contributions(self):
        x = T.Tensor(np.array([3.0]), requires_grad=True)
        y = T.mul(x, x)
        T.add(y, y).sum().backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_deep_chain_beyond_recursion_limit(self):
        x = T.Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(3000):
            y = T.add(y, 0.001)
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [1.0])

    def test_determinism(self):
        a = _rand((4, 4), 0)
        r1 = T.softmax(T.matmul(a, a)).data.copy()
        r2 = T.softmax(T.matmul(a, a)).data.copy()
        np.testing.assert_array_equal(r1, r2)
