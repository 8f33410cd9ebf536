import numpy as np
import pytest

from tsmantis.autograd import (AdamW, DimensionError, GradTape, LayerNorm, Linear, LrSchedule,
                               OptimizerState, Tensor, adamw_step, check_gradients, conv1d,
                               default_dtype, dropout, get_default_dtype, layer_norm,
                               log_softmax, lr_at, matmul, no_grad, numerical_grad,
                               relative_error, softmax, sqrt)

from gradcases import OP_CASES, param


class TestTensorBasics:
    def test_default_dtype_is_float32(self):
        assert get_default_dtype() == np.float32
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float32

    def test_default_dtype_context(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_no_grad_records_nothing(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            out = (a * a).sum()
        assert not out.requires_grad

    def test_tape_is_topological(self, f64):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = a * 2.0
        c = b + a
        out = c.sum()
        tape = GradTape.record(out)
        order = {id(t): i for i, t in enumerate(tape.nodes)}
        # each node appears after all of its parents
        for node in tape.nodes:
            for parent in node._parents:
                if id(parent) in order:
                    assert order[id(parent)] < order[id(node)]

    def test_unused_parameter_gets_zero_grad(self, f64):
        a = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([3.0], requires_grad=True)
        unused.grad = np.zeros(1)
        (a * a).sum().backward()
        np.testing.assert_array_equal(unused.grad, [0.0])
        np.testing.assert_allclose(a.grad, [2.0, 4.0])

    def test_gradient_accumulates_over_reuse(self, f64):
        a = Tensor([3.0], requires_grad=True)
        (a * a * a).sum().backward()
        np.testing.assert_allclose(a.grad, [27.0])


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_arithmetic(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast_gradient(self, f64, rng):
        a, b = param(rng, 4, 3, 5), param(rng, 5, 2)
        errs = check_gradients(lambda: matmul(a, b).sum(), {"a": a, "b": b})
        assert max(errs.values()) < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_overflow_safe(self):
        out = softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)

    def test_log_ratio_oracle(self):
        out = softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=1e-6)

    def test_simplex(self, rng):
        out = softmax(Tensor(rng.normal(0, 5, (20, 7))), axis=1).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_log_softmax_matches(self, rng):
        x = Tensor(rng.normal(size=(4, 5)))
        np.testing.assert_allclose(np.exp(log_softmax(x).data), softmax(x).data, rtol=1e-5)


class TestLayerNorm:
    def test_constant_collapses_to_beta(self):
        out = layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, [0, 0, 0])

    def test_hand_formula(self, f64):
        out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [-1.0, 1.0])


class TestConv1d:
    def test_identity_kernel(self):
        out = conv1d(Tensor([[1.0, 2.0, 3.0, 4.0]]), Tensor([[[1.0]]]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3, 4]])

    def test_sliding_sum(self):
        out = conv1d(Tensor([[1.0, 2.0, 3.0, 4.0]]), Tensor([[[1.0, 1.0]]]))
        np.testing.assert_array_equal(out.data, [[3, 5, 7]])

    def test_kernel_too_long(self):
        with pytest.raises(DimensionError):
            conv1d(Tensor([[1.0, 2.0]]), Tensor(np.ones((1, 1, 5))))

    def test_matches_numpy_correlate(self, rng):
        x = rng.normal(size=30)
        k = rng.normal(size=4)
        out = conv1d(Tensor(x[None]), Tensor(k[None, None]), stride=1, padding=2).data[0]
        expected = np.correlate(np.pad(x, 2), k, mode="valid")
        np.testing.assert_allclose(out, expected, rtol=1e-4, atol=1e-5)





class TestGradients:
    @pytest.mark.parametrize("name", sorted(OP_CASES))
    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, name, seed, f64):
        fn, params = OP_CASES[name](np.random.default_rng(seed))
        errs = check_gradients(fn, params, step=1e-3, max_entries=12,
                               rng=np.random.default_rng(seed))
        assert max(errs.values()) < 1e-3, errs

    def test_sqrt_zero_gradient_is_finite(self, f64):
        a = Tensor([0.0, 4.0], requires_grad=True)
        sqrt(a).sum().backward()
        assert np.all(np.isfinite(a.grad))
        np.testing.assert_allclose(a.grad[1], 0.25)

    def test_relative_error_both_zero(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0

    def test_numerical_grad_quadratic(self, f64):
        a = Tensor([1.5, -2.0], requires_grad=True)
        np.testing.assert_allclose(numerical_grad(lambda: (a * a).sum(), a), [3.0, -4.0])


class TestDropout:
    def test_identity_when_not_training(self, rng):
        x = Tensor(rng.normal(size=(5, 5)))
        np.testing.assert_array_equal(dropout(x, 0.5, False, rng).data, x.data)

    def test_inverted_scaling_preserves_mean(self):
        x = Tensor(np.ones(200_000))
        out = dropout(x, 0.25, True, np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, np.float32(1 / 0.75)}
        assert abs(out.mean() - 1.0) < 0.01


class TestModules:
    def test_linear_shapes_and_params(self, rng):
        lin = Linear(3, 5, rng)
        assert lin(Tensor(np.ones((2, 3)))).shape == (2, 5)
        assert lin.num_parameters() == 20

    def test_state_dict_round_trip(self, rng):
        a, b = Linear(3, 4, rng), Linear(3, 4, rng)
        b.load_state_dict(a.state_dict())
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_load_state_dict_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            Linear(3, 4, rng).load_state_dict(Linear(4, 4, rng).state_dict())

    def test_layer_norm_module(self):
        out = LayerNorm(4)(Tensor([[1.0, 2.0, 3.0, 4.0]])).data
        assert abs(out.mean()) < 1e-6


class TestSchedule:
    sched = LrSchedule(base_lr=2e-4, total_epochs=100, warmup_epochs=10)

    def test_warmup_end_is_base(self):
        assert lr_at(self.sched, 10) == pytest.approx(2e-4)

    def test_final_is_zero(self):
        assert lr_at(self.sched, 100) == pytest.approx(0.0, abs=1e-15)

    def test_first_epoch(self):
        assert lr_at(self.sched, 0) == pytest.approx(2e-5)

    def test_cosine_midpoint(self):
        assert lr_at(self.sched, 55) == pytest.approx(1e-4)

    @pytest.mark.parametrize("epoch", [-1, 101])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            lr_at(self.sched, epoch)


class TestAdamW:
    def test_zero_grad_no_decay_unchanged(self):
        p = [np.array([1.0, -2.0])]
        state = OptimizerState(lr=0.1, weight_decay=0.0)
        new = adamw_step(p, [np.zeros(2)], state)
        np.testing.assert_array_equal(new[0], [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        # bias-corrected first step is lr * g / (|g| + eps)
        state = OptimizerState(lr=0.01, weight_decay=0.0)
        new = adamw_step([np.array([1.0])], [np.array([3.0])], state)
        np.testing.assert_allclose(new[0], [1.0 - 0.01], rtol=1e-6)

    def test_decoupled_decay(self):
        state = OptimizerState(lr=0.1, weight_decay=0.5)
        new = adamw_step([np.array([2.0])], [np.array([0.0])], state)
        np.testing.assert_allclose(new[0], [2.0 * (1 - 0.05)])

    def test_deterministic(self, rng):
        p, g = [rng.normal(size=5)], [rng.normal(size=5)]
        a = adamw_step([p[0].copy()], g, OptimizerState(lr=0.1, weight_decay=0.05))
        b = adamw_step([p[0].copy()], g, OptimizerState(lr=0.1, weight_decay=0.05))
        assert a[0].tobytes() == b[0].tobytes()

    def test_class_minimises_quadratic(self, f64):
        w = Tensor([5.0, -3.0], requires_grad=True)
        opt = AdamW([w], lr=0.1, weight_decay=0.0)
        for _ in range(300):
            opt.zero_grad()
            (w * w).sum().backward()
            opt.step()
        assert np.abs(w.data).max() < 0.05


class TestRelativeError:
    def test_floor_absorbs_round_off(self):
        assert relative_error(np.zeros(3), np.full(3, 1e-13)) < 1e-4

    def test_scaled(self):
        assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
