from __future__ import annotations

import numpy as np
import pytest

from prunekit import numerics as nm
from prunekit.errors import NumericError, ShapeError
from prunekit.numerics import AdamW, Rng, Tensor, adamw_step, grad_check


class TestRng:
    def test_same_seed_same_sequence(self) -> None:
        a = Rng(42).normal((100,))
        b = Rng(42).normal((100,))
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self) -> None:
        assert not np.array_equal(Rng(1).normal((50,)), Rng(2).normal((50,)))

    def test_split_is_deterministic_and_independent(self) -> None:
        root = Rng(9)
        child_a = root.split("model")
        child_b = Rng(9).split("model")
        other = Rng(9).split("data")
        assert np.array_equal(child_a.normal((10,)), child_b.normal((10,)))
        assert not np.array_equal(Rng(9).split("model").normal((10,)),
                                  other.normal((10,)))


class TestOps:
    def test_matmul_identity(self) -> None:
        out = nm.matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(out.data, [[5.0, 6.0], [7.0, 8.0]])

    def test_matmul_hand_case(self) -> None:
        out = nm.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_matmul_shape_error_names_both_shapes(self) -> None:
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_matmul_gradient_of_sum_is_ones_times_bT(self) -> None:
        rng = Rng(0)
        a = Tensor(rng.normal((4, 5)), requires_grad=True)
        b = Tensor(rng.normal((5, 3)), requires_grad=True)
        nm.tsum(nm.matmul(a, b)).backward()
        expected = np.ones((4, 3)) @ b.data.T
        assert np.allclose(a.grad, expected, atol=1e-12)

    def test_matmul_gradient_matches_finite_differences(self) -> None:
        rng = Rng(1)
        a = Tensor(rng.normal((4, 5)), requires_grad=True)
        b = Tensor(rng.normal((5, 3)), requires_grad=True)
        report = grad_check(lambda: nm.tsum(nm.matmul(a, b)),
                            [("a", a), ("b", b)], h=1e-4, tol=1e-3)
        assert report.passed

    def test_softmax_uniform_on_constant_rows(self) -> None:
        out = nm.softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_softmax_rows_sum_to_one(self) -> None:
        x = Tensor(Rng(3).normal((5, 7)))
        out = nm.softmax(x, axis=-1)
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_softmax_rejects_non_finite(self) -> None:
        with pytest.raises(NumericError):
            nm.softmax(Tensor([1.0, np.nan]), axis=-1)

    def test_cross_entropy_confident_correct_approaches_zero(self) -> None:
        logits = Tensor([[30.0, 0.0, 0.0], [0.0, 30.0, 0.0]])
        loss = nm.cross_entropy(logits, [0, 1])
        assert loss.item() < 1e-10

    def test_cross_entropy_rejects_bad_targets(self) -> None:
        with pytest.raises(ValueError):
            nm.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_layer_norm_zero_mean_unit_variance(self) -> None:
        x = Tensor(Rng(4).normal((6, 8)) * 3.0 + 2.0)
        out = nm.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)
        assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-3)

    def test_layer_norm_gradient_matches_finite_differences(self) -> None:
        rng = Rng(5)
        x = Tensor(rng.normal((3, 6)), requires_grad=True)
        g = Tensor(rng.normal((6,)), requires_grad=True)
        b = Tensor(rng.normal((6,)), requires_grad=True)

        def loss():
            out = nm.layer_norm(x, g, b)
            return nm.tsum(nm.mul(out, out))

        report = grad_check(loss, [("x", x), ("g", g), ("b", b)], h=1e-4, tol=1e-3)
        assert report.passed, report.per_param

    def test_take_rows_and_softmax_cross_entropy_grads(self) -> None:
        rng = Rng(6)
        emb = Tensor(rng.normal((7, 4)), requires_grad=True)
        w = Tensor(rng.normal((4, 7)), requires_grad=True)

        def loss():
            x = nm.take_rows(emb, [1, 3, 3, 5])
            return nm.cross_entropy(nm.matmul(x, w), [2, 0, 1, 6])

        report = grad_check(loss, [("emb", emb), ("w", w)], h=1e-4, tol=1e-3)
        assert report.passed, report.per_param

    def test_gradient_property_suite(self) -> None:
        """Composite expressions over all primitive ops pass grad_check
        on 20 random instances."""
        for case in range(20):
            rng = Rng(1000 + case)
            x = Tensor(rng.normal((3, 4)), requires_grad=True)
            w = Tensor(rng.normal((4, 4)), requires_grad=True)
            g = Tensor(rng.normal((4,)), requires_grad=True)
            b = Tensor(rng.normal((4,)), requires_grad=True)

            def loss():
                h = nm.relu(nm.matmul(x, w))
                h = nm.layer_norm(h, g, b)
                h = nm.softmax(nm.add(h, nm.mul(x, 0.5)), axis=-1)
                h = nm.transpose(nm.reshape(h, (2, 2, 4)), (1, 0, 2))
                return nm.tmean(nm.power(h, 2.0))

            report = grad_check(loss, [("x", x), ("w", w), ("g", g), ("b", b)],
                                h=1e-4, tol=1e-3)
            assert report.passed, (case, report.per_param)


class TestAdamW:
    def test_zero_grad_zero_decay_leaves_params(self) -> None:
        p = Tensor([1.0, -2.0], requires_grad=True)
        state = AdamW([("p", p)], learning_rate=0.1, weight_decay=0.0)
        adamw_step(state.params, [np.zeros(2)], state)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_descends_quadratic(self) -> None:
        w = Tensor([1.0], requires_grad=True)
        state = AdamW([("w", w)], learning_rate=0.1)
        adamw_step(state.params, [2.0 * w.data], state)
        assert 0.0 < w.data[0] < 1.0

    def test_reaches_quadratic_minimum(self) -> None:
        w = Tensor([1.0, -3.0], requires_grad=True)
        state = AdamW([("w", w)], learning_rate=0.05)
        for _ in range(200):
            adamw_step(state.params, [2.0 * w.data], state)
        assert float(np.sum(w.data ** 2)) < 1e-6

    def test_step_counter_increases(self) -> None:
        w = Tensor([1.0], requires_grad=True)
        state = AdamW([("w", w)], learning_rate=0.1)
        for expected in (1, 2, 3):
            adamw_step(state.params, [np.ones(1)], state)
            assert state.step == expected

    def test_nan_gradient_names_parameter(self) -> None:
        w = Tensor([1.0], requires_grad=True)
        state = AdamW([("layer.weight", w)], learning_rate=0.1)
        with pytest.raises(NumericError, match="layer.weight"):
            adamw_step(state.params, [np.array([np.nan])], state)

    def test_decay_is_decoupled(self) -> None:
        # with zero gradient, decay still shrinks the parameter
        w = Tensor([1.0], requires_grad=True)
        state = AdamW([("w", w)], learning_rate=0.1, weight_decay=0.5)
        adamw_step(state.params, [np.zeros(1)], state)
        assert np.isclose(w.data[0], 1.0 - 0.1 * 0.5)


class TestGradCheck:
    def test_linear_function_exact(self) -> None:
        w = Tensor([2.0, -1.0], requires_grad=True)
        report = grad_check(lambda: nm.tsum(nm.mul(w, 3.0)), [("w", w)],
                            h=1e-4, tol=1e-3)
        assert report.passed
        assert report.max_rel_error < 1e-8

    def test_corrupted_gradient_is_flagged(self) -> None:
        w = Tensor([1.0, 2.0], requires_grad=True)

        def loss():
            out = nm.mul(w, w)
            # sabotage the backward pass of this node only
            original = out._backward

            def corrupted():
                original()
                w.grad[0] += 1.0

            out._backward = corrupted
            return nm.tsum(out)

        report = grad_check(loss, [("w", w)], h=1e-4, tol=1e-3)
        assert not report.passed
        assert any(f.param == "w" and f.index == (0,) for f in report.failures)

    def test_rejects_nonpositive_h(self) -> None:
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda: nm.tsum(w), [("w", w)], h=0.0)
