import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dflgcn.nn import (BatchNorm, Dense, JointConv1d, LayerStateError, MeanPool, OptimizerState,
                       ReLU, ShapeError, Sigmoid, TemporalConv, check_gradients, cross_entropy,
                       frozen_running_stats, glorot_uniform, grad_check, matmul,
                       numeric_gradient, relative_error, sgd_nesterov_step, softmax)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_hand_product(self):
        assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(np.zeros((2, 3)), np.zeros((4, 5)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)

    def test_no_overflow(self):
        out = softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)

    def test_closed_form(self):
        z = np.array([1.0, 2.0, 3.0])
        direct = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(softmax(z), direct, rtol=0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 9)),
                  elements=st.floats(-1e3, 1e3)))
    def test_positive_and_normalized(self, x):
        p = softmax(x, axis=-1)
        assert np.all(p > 0) or np.all(p >= 0)  # tiny entries may underflow to 0
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


class TestCrossEntropy:
    def test_uniform_is_log_c(self):
        loss, _ = cross_entropy(np.zeros((4, 60)), [0, 5, 59, 7])
        assert loss == pytest.approx(math.log(60), abs=1e-12)
        assert loss == pytest.approx(4.0943, abs=1e-4)

    @pytest.mark.parametrize("c", [2, 3, 17, 60, 120])
    def test_uniform_every_c(self, c):
        assert cross_entropy(np.zeros((2, c)), [0, c - 1])[0] == pytest.approx(math.log(c),
                                                                                 abs=1e-12)

    def test_closed_form(self):
        loss, _ = cross_entropy(np.array([[10.0, 0.0, 0.0]]), [0])
        assert loss == pytest.approx(math.log1p(2 * math.exp(-10)), rel=1e-12)
        assert loss == pytest.approx(9.08e-5, rel=1e-3)

    def test_gradient_against_finite_differences(self, rng):
        logits = rng.standard_normal((4, 5))
        labels = np.array([0, 3, 4, 1])
        _, grad = cross_entropy(logits, labels)
        num = numeric_gradient(lambda: cross_entropy(logits, labels)[0], logits, 1e-5)
        assert relative_error(grad, num) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            cross_entropy(np.zeros((1, 3)), [3])

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
    def test_non_negative(self, logits):
        assert cross_entropy(logits, [0, 1, 3])[0] >= 0


class TestLayerContract:
    def test_zero_dense_gives_zero(self, rng):
        d = Dense(4, 3, rng)
        d.params["weight"][:] = 0
        np.testing.assert_array_equal(d.forward(rng.standard_normal((5, 4))), np.zeros((5, 3)))

    def test_scalar_chain_rule(self):
        d = Dense(1, 1)
        d.params["weight"][:] = 2.0
        d.params["bias"][:] = 0.0
        assert d.forward(np.array([[3.0]])).item() == 6.0
        dx = d.backward(np.array([[1.0]]))
        assert dx.item() == 2.0
        assert d.grads["weight"].item() == 3.0

    def test_backward_accumulates(self, rng):
        d = Dense(3, 2, rng)
        x, dy = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
        d.forward(x)
        d.backward(dy)
        once = d.grads["weight"].copy()
        d.backward(dy)
        np.testing.assert_allclose(d.grads["weight"], 2 * once)
        d.zero_grad()
        assert not d.grads["weight"].any()

    @pytest.mark.parametrize("make", [
        lambda: Dense(3, 2), ReLU, Sigmoid, lambda: BatchNorm(3), MeanPool,
        lambda: TemporalConv(3, 2, 3), lambda: JointConv1d(3, 2, 3)])
    def test_backward_before_forward(self, make):
        with pytest.raises(LayerStateError):
            make().backward(np.zeros((1, 2)))

    def test_params_and_grads_match(self, rng):
        for layer in (Dense(3, 2, rng), BatchNorm(4), TemporalConv(2, 3, 5, 2, rng, bias=True),
                      JointConv1d(2, 1, 3, rng)):
            assert layer.params.keys() == layer.grads.keys()
            for k in layer.params:
                assert layer.params[k].shape == layer.grads[k].shape

    def test_glorot_bounds(self, rng):
        w = glorot_uniform(rng, (200, 300), 200, 300)
        limit = math.sqrt(6 / 500)
        assert w.min() >= -limit and w.max() <= limit
        assert w.min() < -0.9 * limit and w.max() > 0.9 * limit

    def test_biases_start_at_zero(self, rng):
        assert not Dense(3, 2, rng).params["bias"].any()
        assert not JointConv1d(3, 2, 3, rng).params["bias"].any()


def naive_temporal_conv(x, w, stride):
    b, c, t, v = x.shape
    k, o, _ = w.shape
    pad = (k - 1) // 2
    t_out = (t + 2 * pad - k) // stride + 1
    y = np.zeros((b, o, t_out, v))
    for bi in range(b):
        for oi in range(o):
            for tp in range(t_out):
                for vi in range(v):
                    s = 0.0
                    for ki in range(k):
                        src = tp * stride + ki - pad
                        if 0 <= src < t:
                            s += sum(w[ki, oi, ci] * x[bi, ci, src, vi] for ci in range(c))
                    y[bi, oi, tp, vi] = s
    return y


class TestTemporalConv:
    @pytest.mark.parametrize("t,k,stride", [(7, 3, 1), (9, 5, 2), (10, 9, 2), (4, 9, 1),
                                            (11, 3, 3)])
    def test_matches_loop_oracle(self, rng, backend, t, k, stride):
        layer = TemporalConv(3, 2, k, stride, rng)
        x = rng.standard_normal((2, 3, t, 4))
        np.testing.assert_allclose(layer.forward(x), naive_temporal_conv(x, layer.params["weight"],
                                                                         stride), atol=1e-12)

    def test_output_length_is_ceil(self):
        layer = TemporalConv(1, 1, 9, 2)
        for t in (1, 2, 9, 10, 100, 101):
            assert layer.forward(np.zeros((1, 1, t, 2))).shape[2] == math.ceil(t / 2)


class TestBatchNorm:
    def test_normalizes_over_all_but_channel(self, rng):
        bn = BatchNorm(3)
        y = bn.forward(rng.normal(5, 3, (4, 3, 6, 5)))
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_running_stats_momentum(self, rng):
        bn = BatchNorm(2)
        x = rng.normal(2, 3, (5, 2, 7))
        bn.forward(x)
        mean, var = x.mean(axis=(0, 2)), x.var(axis=(0, 2))
        np.testing.assert_allclose(bn.running_stats["mean"], 0.1 * mean, atol=1e-14)
        np.testing.assert_allclose(bn.running_stats["var"], 0.9 + 0.1 * var, atol=1e-14)

    def test_eval_uses_running_stats(self, rng):
        bn = BatchNorm(2)
        bn.running_stats["mean"][:] = [1.0, -1.0]
        bn.running_stats["var"][:] = [4.0, 0.25]
        bn.eval()
        x = rng.standard_normal((3, 2, 4))
        expected = (x - np.array([1.0, -1.0])[None, :, None]) / np.sqrt(
            np.array([4.0, 0.25]) + 1e-5)[None, :, None]
        np.testing.assert_allclose(bn.forward(x), expected, atol=1e-12)
        assert bn.running_stats["mean"].tolist() == [1.0, -1.0]

    def test_frozen_running_stats(self, rng):
        bn = BatchNorm(2)
        with frozen_running_stats([bn]):
            bn.forward(rng.standard_normal((3, 2, 4)))
        assert not bn.running_stats["mean"].any()
        assert bn.track_running_stats

    def test_backends_agree(self, rng):
        from dflgcn import kernels
        x, dy = rng.standard_normal((3, 4, 10)), rng.standard_normal((3, 4, 10))
        outs = []
        for name in kernels.available_backends():
            with kernels.use_backend(name):
                bn = BatchNorm(4)
                y = bn.forward(x)
                outs.append((y, bn.backward(dy), bn.grads["gamma"].copy()))
        for other in outs[1:]:
            for a, b in zip(outs[0], other):
                np.testing.assert_allclose(a, b, atol=1e-12)


class TestOptimizer:
    def test_zero_grad_keeps_params_and_decays_velocity(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = OptimizerState(0.1, 0.9, 0.0)
        opt.velocity["w"] = np.zeros(2)
        sgd_nesterov_step(opt, p, {"w": np.zeros(2)})
        assert p["w"].tolist() == [1.0, -2.0]
        # with a non-zero velocity the step moves p by mu * v
        opt.velocity["w"] = np.array([1.0, 1.0])
        sgd_nesterov_step(opt, p, {"w": np.zeros(2)})
        np.testing.assert_allclose(opt.velocity["w"], [0.9, 0.9])
        np.testing.assert_allclose(p["w"], [1.81, -1.19])

    def test_plain_sgd(self):
        p = {"w": np.array([1.0])}
        sgd_nesterov_step(OptimizerState(0.1, 0.0, 0.0), p, {"w": np.array([1.0])})
        assert p["w"][0] == pytest.approx(0.9, abs=1e-15)

    def test_two_steps_on_quadratic(self):
        # f(p) = 0.5 * a * p^2, gradient a * p
        a, lr, mu, wd = 3.0, 0.05, 0.9, 0.01
        p = {"w": np.array([2.0])}
        opt = OptimizerState(lr, mu, wd)
        sp, sv = 2.0, 0.0
        for _ in range(2):
            sgd_nesterov_step(opt, p, {"w": a * p["w"]})
            g = a * sp + wd * sp
            sv = mu * sv - lr * g
            sp = sp + mu * sv - lr * g
        assert p["w"][0] == pytest.approx(sp, abs=1e-12)
        assert opt.velocity["w"][0] == pytest.approx(sv, abs=1e-12)

    def test_weight_decay_does_not_touch_grads(self):
        g = np.array([1.0])
        sgd_nesterov_step(OptimizerState(0.1, 0.9, 0.5), {"w": np.array([2.0])}, {"w": g})
        assert g[0] == 1.0


LAYER_CASES = {
    "dense": (lambda r: Dense(4, 3, r), (3, 4)),
    "sigmoid": (lambda r: Sigmoid(), (3, 5)),
    "batchnorm": (lambda r: BatchNorm(3), (4, 3, 5, 2)),
    "temporal_conv": (lambda r: TemporalConv(3, 2, 5, 2, r, bias=True), (2, 3, 9, 3)),
    "joint_conv": (lambda r: JointConv1d(3, 2, 3, r), (2, 3, 6)),
    "mean_pool": (lambda r: MeanPool(), (2, 3, 4, 5)),
}


class TestGradCheck:
    @pytest.mark.parametrize("name", sorted(LAYER_CASES))
    def test_layer(self, name, rng, backend):
        make, shape = LAYER_CASES[name]
        report = grad_check(make(rng), rng.standard_normal(shape), seed=11)
        assert report.max_rel_error < 1e-6, report.format_table()

    def test_relu_away_from_kink(self, rng):
        x = rng.standard_normal((3, 5))
        x += 0.1 * np.sign(x)
        assert grad_check(ReLU(), x).max_rel_error < 1e-8

    def test_linear_layer_is_essentially_exact(self, rng):
        assert grad_check(Dense(5, 4, rng), rng.standard_normal((3, 5))).max_rel_error < 1e-9

    @pytest.mark.parametrize("name", ["dense", "sigmoid", "temporal_conv", "joint_conv",
                                      "mean_pool"])
    def test_plain_sum_input_gradient(self, name, rng):
        make, shape = LAYER_CASES[name]
        layer = make(rng)
        x = rng.standard_normal(shape)
        y = layer.forward(x)
        dx = layer.backward(np.ones_like(y))
        num = numeric_gradient(lambda: float(layer.forward(x).sum()), x, 1e-5)
        assert relative_error(dx, num) < 1e-6

    def test_pooling_has_no_param_entries(self, rng):
        report = grad_check(MeanPool(), rng.standard_normal((2, 3, 4)))
        assert report.param_entries == []
        assert [e.name for e in report.entries] == ["input"]

    def test_reports_failure_instead_of_raising(self, rng):
        x = rng.standard_normal(4)
        report = check_gradients(lambda: float(np.sum(x ** 2)), {"x": 3 * x}, {"x": x})
        assert not report.passed
        assert report.max_rel_error > 0.1

    def test_running_stats_untouched(self, rng):
        bn = BatchNorm(3)
        grad_check(bn, rng.standard_normal((4, 3, 5)))
        assert not bn.running_stats["mean"].any()
        np.testing.assert_array_equal(bn.running_stats["var"], np.ones(3))

    def test_kink_margin_reported(self, rng):
        x = np.array([[1e-7, 1.0, -2.0]])
        report = grad_check(ReLU(), x)
        assert report.kink_margin == pytest.approx(1e-7)
        assert "min |ReLU input|" in report.format_table()
