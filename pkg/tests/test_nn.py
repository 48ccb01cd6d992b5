import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tipstate.errors import BatchTooSmall, ShapeMismatch
from tipstate.nn import (LossSpec, OptimizerState, activation, batchnorm, conv2d_backward,
                         conv2d_forward, elu, gradient_check, loss, lr_schedule, optimizer_step,
                         sigmoid, softmax)
from tipstate.nn.functional import batchnorm_backward, batchnorm_forward
from tipstate.nn.gradcheck import relative_error
from tipstate.nn.layers import (BatchNorm, Conv2D, Dense, Elu, GlobalAvgPool, MaxPool, Sigmoid,
                                Softmax)
from tipstate.zoo import NetworkGraph


def naive_conv(x, w, b, stride):
    """Direct six-loop cross-correlation with TF-style 'same' padding."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = -(-h // stride), -(-wd // stride)
    ph = max((ho - 1) * stride + k - h, 0)
    pw = max((wo - 1) * stride + k - wd, 0)
    top, left = ph // 2, pw // 2
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                r = i * stride + di - top
                                q = j * stride + dj - left
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[bi, ic, r, q] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = acc
    return out


class TestConvForward:
    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 9, 9))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d_forward(x, w, np.zeros(1), 1), x)

    def test_ones_kernel_on_constant(self):
        x = np.full((1, 1, 7, 7), 2.5)
        out = conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1), 1)
        np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * 2.5, rtol=0, atol=1e-12)

    def test_matches_six_loop_reference(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        for stride in (1, 2):
            np.testing.assert_allclose(conv2d_forward(x, w, b, stride), naive_conv(x, w, b, stride),
                                       rtol=0, atol=1e-10)

    @pytest.mark.parametrize("h", [5, 6, 7, 8])
    def test_output_side_is_ceil(self, h):
        x = np.zeros((1, 1, h, h))
        out = conv2d_forward(x, np.zeros((2, 1, 3, 3)), np.zeros(2), 2)
        assert out.shape == (1, 2, math.ceil(h / 2), math.ceil(h / 2))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            conv2d_forward(np.zeros((1, 2, 8, 8)), np.zeros((1, 3, 3, 3)), np.zeros(1), 1)


class TestConvBackward:
    def test_zero_grad(self):
        rng = np.random.default_rng(2)
        x, w = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
        gx, gw, gb = conv2d_backward(x, w, np.zeros((2, 3, 6, 6)), 1)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_one_hot_grad_gives_patch(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(1, 2, 3, 3))
        g = np.zeros((1, 1, 6, 6))
        g[0, 0, 2, 3] = 1.0
        _, gw, gb = conv2d_backward(x, w, g, 1)
        np.testing.assert_array_equal(gw[0], x[0, :, 1:4, 2:5])
        assert gb[0] == 1.0

    @pytest.mark.parametrize("stride", [1, 2])
    def test_finite_differences(self, stride):
        rng = np.random.default_rng(4 + stride)
        x = rng.normal(size=(2, 2, 7, 7))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        g = rng.normal(size=conv2d_forward(x, w, b, stride).shape)
        gx, gw, gb = conv2d_backward(x, w, g, stride)
        h = 1e-5
        for arr, grad in ((x, gx), (w, gw), (b, gb)):
            num = np.zeros_like(arr)
            for i in np.ndindex(arr.shape):
                old = arr[i]
                arr[i] = old + h
                up = (conv2d_forward(x, w, b, stride) * g).sum()
                arr[i] = old - h
                dn = (conv2d_forward(x, w, b, stride) * g).sum()
                arr[i] = old
                num[i] = (up - dn) / (2 * h)
            err = np.linalg.norm(num - grad) / (np.linalg.norm(num) + np.linalg.norm(grad))
            assert err < 1e-4


class TestBatchNorm:
    def test_train_standardizes(self):
        x = np.random.default_rng(5).normal(3.0, 2.0, size=(8, 3, 5, 5))
        out, _, _ = batchnorm(x, np.ones(3), np.zeros(3), "train", eps=1e-12)
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-9
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-6)

    def test_default_eps_variance(self):
        x = np.random.default_rng(5).normal(3.0, 2.0, size=(8, 3, 5, 5))
        out, _, _ = batchnorm(x, np.ones(3), np.zeros(3), "train")
        v = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), v / (v + 1e-5), rtol=1e-12)

    def test_affine(self):
        x = np.random.default_rng(6).normal(size=(16, 2, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out, _, _ = batchnorm(x, np.full(2, 2.0), np.full(2, 3.0), "train", eps=1e-12)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-5)

    def test_running_stats_momentum(self):
        x = np.random.default_rng(7).normal(1.0, 1.0, size=(4, 1, 3, 3))
        _, rm, rv = batchnorm(x, np.ones(1), np.zeros(1), "train")
        np.testing.assert_allclose(rm, 0.1 * x.mean(), rtol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(), rtol=1e-12)

    def test_infer_uses_running_stats(self):
        x = np.random.default_rng(8).normal(size=(3, 2, 4, 4))
        out, _, _ = batchnorm(x, np.ones(2), np.zeros(2), "infer", running_mean=np.full(2, 0.5),
                              running_var=np.full(2, 4.0))
        np.testing.assert_allclose(out, (x - 0.5) / np.sqrt(4.0 + 1e-5))

    def test_batch_too_small(self):
        with pytest.raises(BatchTooSmall):
            batchnorm(np.zeros((1, 1, 4, 4)), np.ones(1), np.zeros(1), "train")

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 5, 5, 3))  # channels last
        gamma, beta = np.array([0.5, 1.5, 2.0]), np.array([0.1, -0.2, 0.3])
        g = rng.normal(size=x.shape)

        def f(x_, gm, bt):
            out = batchnorm_forward(x_, gm, bt, True, np.zeros(3), np.ones(3))[0]
            return (out * g).sum()

        _, cache, _, _ = batchnorm_forward(x, gamma, beta, True, np.zeros(3), np.ones(3))
        dx, dgamma, dbeta = batchnorm_backward(g, cache, gamma)
        for arr, grad in ((x, dx), (gamma, dgamma), (beta, dbeta)):
            num = np.zeros_like(arr)
            for i in np.ndindex(arr.shape):
                old = arr[i]
                arr[i] = old + 1e-5
                up = f(x, gamma, beta)
                arr[i] = old - 1e-5
                dn = f(x, gamma, beta)
                arr[i] = old
                num[i] = (up - dn) / 2e-5
            assert relative_error(grad, num) < 1e-4


class TestActivations:
    def test_elu_values(self):
        np.testing.assert_allclose(elu(np.array([0.0, 1.0, -1.0])), [0.0, 1.0, math.exp(-1) - 1])

    def test_softmax_and_sigmoid(self):
        np.testing.assert_allclose(softmax(np.zeros((1, 4))), [[0.25] * 4])
        assert sigmoid(np.array(0.0)) == 0.5

    def test_dispatch(self):
        x = np.array([[-2.0, 0.5]])
        np.testing.assert_array_equal(activation(x, "Elu"), elu(x))
        np.testing.assert_array_equal(activation(x, "Softmax"), softmax(x))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8))
    def test_extreme_inputs_stay_finite(self, vals):
        x = np.array([vals])
        s = softmax(x)
        assert np.isfinite(s).all() and abs(s.sum() - 1) < 1e-9
        sg = sigmoid(x)
        assert np.isfinite(sg).all() and ((sg >= 0) & (sg <= 1)).all()
        assert np.isfinite(elu(x)).all()

    def test_sigmoid_open_interval_moderate(self):
        sg = sigmoid(np.linspace(-30, 30, 101))
        assert ((sg > 0) & (sg < 1)).all()


class TestLoss:
    def test_bce_ln2(self):
        v, _ = loss(np.array([[0.5]]), np.array([[1.0]]))
        assert abs(v - math.log(2)) < 1e-12

    def test_perfect_prediction(self):
        t = np.eye(3)[[0, 2, 1]]
        for kind in ("BinaryCrossEntropy", "CategoricalCrossEntropy"):
            assert loss(t.copy(), t, LossSpec(kind))[0] < 1e-6

    @pytest.mark.parametrize("kind", ["BinaryCrossEntropy", "CategoricalCrossEntropy"])
    def test_gradient_fd(self, kind):
        rng = np.random.default_rng(10)
        p = rng.uniform(0.05, 0.95, size=(5, 3))
        t = np.eye(3)[rng.integers(0, 3, 5)]
        spec = LossSpec(kind, (1.0, 2.5, 0.7))
        _, g = loss(p, t, spec)
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            q = p.copy(); q[i] += 1e-6
            r = p.copy(); r[i] -= 1e-6
            num[i] = (loss(q, t, spec)[0] - loss(r, t, spec)[0]) / 2e-6
        assert np.linalg.norm(num - g) / np.linalg.norm(num) < 1e-5

    def test_weights_select_by_true_class(self):
        p = np.array([[0.7, 0.2], [0.4, 0.9]])
        t = np.eye(2)[[0, 1]]
        w = (3.0, 0.5)
        terms = -(t * np.log(p) + (1 - t) * np.log(1 - p))
        expected = (3.0 * terms[0].sum() + 0.5 * terms[1].sum()) / 4
        assert abs(loss(p, t, LossSpec(class_weights=w))[0] - expected) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            loss(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(ValueError):
            LossSpec(class_weights=(1.0, 0.0))


class TestOptimizers:
    def test_sgd_one_step(self):
        p = {"a": np.array([1.0])}
        optimizer_step(OptimizerState("SGD", 0.1), p, {"a": np.array([2.0])})
        assert p["a"][0] == pytest.approx(0.8, abs=1e-15)

    def test_adam_first_step_is_lr(self):
        p = {"a": np.array([1.0, -2.0, 3.0])}
        g = {"a": np.array([0.3, -7.0, 1e-3])}
        optimizer_step(OptimizerState("adam", 1e-3), p, g)
        np.testing.assert_allclose(np.abs(p["a"] - [1.0, -2.0, 3.0]), 1e-3, rtol=1e-4)

    def test_adam_quadratic(self):
        st_ = OptimizerState("Adam", 0.1)
        p = {"t": np.array([5.0])}
        for _ in range(500):
            optimizer_step(st_, p, {"t": 2 * p["t"]})
        assert abs(p["t"][0]) < 0.01

    def test_reference_updates(self):
        """Two steps of each rule against hand-written formulas."""
        g1, g2 = np.array([0.5, -1.0]), np.array([-0.25, 2.0])
        lr = 0.01

        def ref(rule):
            th = np.array([1.0, 1.0])
            if rule == "RMSprop":
                s = np.zeros(2)
                for g in (g1, g2):
                    s = 0.9 * s + 0.1 * g * g
                    th = th - lr * g / (np.sqrt(s) + 1e-8)
            elif rule == "Adagrad":
                s = np.zeros(2)
                for g in (g1, g2):
                    s = s + g * g
                    th = th - lr * g / (np.sqrt(s) + 1e-8)
            elif rule == "Adadelta":
                s, d = np.zeros(2), np.zeros(2)
                for g in (g1, g2):
                    s = 0.95 * s + 0.05 * g * g
                    dx = -np.sqrt(d + 1e-6) / np.sqrt(s + 1e-6) * g
                    d = 0.95 * d + 0.05 * dx * dx
                    th = th + lr * dx
            elif rule == "Adam":
                m, v = np.zeros(2), np.zeros(2)
                for t, g in enumerate((g1, g2), 1):
                    m = 0.9 * m + 0.1 * g
                    v = 0.999 * v + 0.001 * g * g
                    th = th - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            return th

        for rule in ("RMSprop", "Adagrad", "Adadelta", "Adam"):
            st_ = OptimizerState(rule, lr)
            p = {"x": np.array([1.0, 1.0])}
            for g in (g1, g2):
                optimizer_step(st_, p, {"x": g.copy()})
            np.testing.assert_allclose(p["x"], ref(rule), rtol=1e-12, err_msg=rule)
            assert st_.step_count == 2
            assert all(a.shape == (2,) for a in st_.accumulators["x"].values())

    def test_deterministic(self):
        outs = []
        for _ in range(2):
            st_ = OptimizerState("RMSprop", 1e-3)
            p = {"x": np.linspace(-1, 1, 7)}
            for k in range(5):
                optimizer_step(st_, p, {"x": np.sin(p["x"] * (k + 1))})
            outs.append(p["x"])
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            optimizer_step(OptimizerState("SGD", 0.1), {"a": np.zeros(2)}, {"a": np.zeros(3)})


class TestSchedule:
    def test_values(self):
        assert lr_schedule(1e-3, 3, 0.5) == pytest.approx(1.25e-4, rel=1e-15)
        assert all(lr_schedule(0.01, e, 1.0) == 0.01 for e in range(10))

    @given(st.floats(0.01, 1.0), st.integers(0, 50))
    def test_monotone(self, decay, epoch):
        assert lr_schedule(0.1, epoch + 1, decay) <= lr_schedule(0.1, epoch, decay)


def micro_net(seed, head="sigmoid", classes=3):
    layers = [Conv2D(1, 3, stride=1), BatchNorm(3), Elu(), Conv2D(3, 4, stride=2), BatchNorm(4),
              Elu(), MaxPool(2), GlobalAvgPool(), Dense(4, classes),
              Sigmoid() if head == "sigmoid" else Softmax()]
    return NetworkGraph(layers, classes, 8, dtype=np.float64, seed=seed)


class TestGradientCheck:
    def test_linear_dense(self):
        net = NetworkGraph([GlobalAvgPool(), Dense(1, 2), Sigmoid()], 2, 8, seed=0)
        x = np.random.default_rng(0).normal(size=(3, 8, 8))
        rep = gradient_check(net, x, np.eye(2)[[0, 1, 1]], tolerance=1e-8)
        assert rep.passed, rep.errors

    def test_micro_net(self):
        x = np.random.default_rng(1).normal(size=(2, 1, 8, 8))
        rep = gradient_check(micro_net(3), x, np.eye(3)[[0, 2]])
        assert rep.passed and rep.max_error < 1e-4, rep.errors

    def test_degenerate_zero_case(self):
        net = micro_net(4)
        x = np.zeros((2, 8, 8))
        rep = gradient_check(net, x, np.zeros((2, 3)))
        assert all(np.isfinite(e) for e in rep.errors.values())

    def test_buffers_restored(self):
        net = micro_net(5)
        before = {k: v.copy() for k, v in net.buffers().items()}
        gradient_check(net, np.random.default_rng(2).normal(size=(2, 8, 8)), np.eye(3)[[1, 0]])
        for k, v in net.buffers().items():
            np.testing.assert_array_equal(v, before[k])

    def test_report_flags_broken_gradient(self):
        net = micro_net(6)
        dense = net.layers[8]
        orig = dense.backward

        def broken(g):
            out = orig(g)
            dense.grads["w"] *= 1.5
            return out

        dense.backward = broken
        rep = gradient_check(net, np.random.default_rng(3).normal(size=(2, 8, 8)), np.eye(3)[[1, 2]])
        assert not rep.passed and "8.w" in rep.failures

    def test_small_error_still_flagged(self):
        # a 1e-3 relative slip sits far above the round-off allowance
        net = micro_net(7)
        dense = net.layers[8]
        orig = dense.backward

        def slightly_off(g):
            out = orig(g)
            dense.grads["b"] *= 1.001
            return out

        dense.backward = slightly_off
        rep = gradient_check(net, np.random.default_rng(4).normal(size=(2, 8, 8)), np.eye(3)[[0, 1]])
        assert "8.b" in rep.failures

    def test_roundoff_allowance(self):
        assert relative_error([0.0, 0.0], [1.3e-10, -1.3e-10], noise=2e-10) == 0.0
        assert relative_error([0.0, 0.0], [1.3e-10, -1.3e-10]) > 1e-4
        assert relative_error([1.0, 1.0], [1.001, 1.0], noise=1e-9) > 1e-4
