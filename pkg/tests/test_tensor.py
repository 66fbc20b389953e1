import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somnnet import tensor as T
from somnnet.errors import ParameterError, ShapeError
from somnnet.gradcheck import toy_config
from somnnet.model import LayerSpec, NetworkConfig, build_network

from conftest import central_diff, rel_err


def conv_oracle(x, kernels, biases):
    """Brute-force sliding window over an explicitly zero-padded input."""
    c, length = x.shape
    f, _, k = kernels.shape
    left = (k - 1) // 2
    padded = np.zeros((c, length + k - 1))
    padded[:, left:left + length] = x
    out = np.zeros((f, length))
    for fi in range(f):
        for t in range(length):
            acc = biases[fi]
            for ci in range(c):
                for j in range(k):
                    acc += kernels[fi, ci, j] * padded[ci, t + j]
            out[fi, t] = acc
    return out


class TestConv:
    def test_identity_kernel(self):
        x = np.array([[1.0, 2, 3, 2, 1]])
        out = T.conv1d_forward(x, np.array([[[0.0, 1, 0]]]), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_box_kernel(self):
        x = np.array([[1.0, 2, 3, 2, 1]])
        k = np.array([[[1.0, 1, 1]]])
        expected = conv_oracle(x, k, np.zeros(1))
        np.testing.assert_array_equal(expected, [[3, 6, 7, 6, 3]])
        np.testing.assert_array_equal(T.conv1d_forward(x, k, np.zeros(1)), expected)

    def test_reference_layer_shape(self, rng):
        out = T.conv1d_forward(rng.normal(size=(1, 88)), rng.normal(size=(6, 1, 25)), np.zeros(6))
        assert out.shape == (6, 88)

    @pytest.mark.parametrize("k", [1, 2, 3, 10, 15, 25])
    def test_matches_oracle(self, rng, k):
        x = rng.normal(size=(3, 17))
        w = rng.normal(size=(4, 3, k))
        b = rng.normal(size=4)
        np.testing.assert_allclose(T.conv1d_forward(x, w, b), conv_oracle(x, w, b), atol=1e-12)

    def test_even_kernel_pads_right(self):
        # kernel of length 2: pad_left 0, pad_right 1 -> out[t] = x[t]*k0 + x[t+1]*k1
        out = T.conv1d_forward(np.array([[1.0, 2, 3]]), np.array([[[1.0, 10]]]), None)
        np.testing.assert_array_equal(out, [[21, 32, 3]])

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv1d_forward(np.zeros((2, 5)), np.zeros((1, 3, 3)), None)

    def test_zero_length(self):
        with pytest.raises(ShapeError):
            T.conv1d_forward(np.zeros((1, 0)), np.zeros((1, 1, 3)), None)

    def test_backward_zero_upstream(self, rng):
        x = rng.normal(size=(2, 7))
        w = rng.normal(size=(3, 2, 3))
        dx, dw, db = T.conv1d_backward(np.zeros((3, 7)), x, w)
        assert not dx.any() and not dw.any() and not db.any()

    def test_backward_vs_finite_differences(self, rng):
        x = rng.normal(size=(2, 7))
        w = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=3)
        r = rng.normal(size=(3, 7))
        loss = lambda: float(np.sum(T.conv1d_forward(x, w, b) * r))
        dx, dw, db = T.conv1d_backward(r, x, w)
        assert rel_err(dx, central_diff(loss, x)) < 1e-4
        assert rel_err(dw, central_diff(loss, w)) < 1e-4
        assert rel_err(db, central_diff(loss, b)) < 1e-4

    def test_bias_grad_is_upstream_sum(self, rng):
        up = rng.normal(size=(4, 3, 9))
        _, _, db = T.conv1d_backward(up, rng.normal(size=(4, 2, 9)), rng.normal(size=(3, 2, 5)))
        np.testing.assert_allclose(db, up.sum(axis=(0, 2)))

    def test_backward_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            T.conv1d_backward(np.zeros((3, 6)), rng.normal(size=(2, 7)), rng.normal(size=(3, 2, 3)))

    @given(length=st.integers(1, 40), k=st.integers(1, 30), c=st.integers(1, 3))
    @settings(max_examples=60, deadline=None)
    def test_same_padding_preserves_length(self, length, k, c):
        out = T.conv1d_forward(np.ones((c, length)), np.ones((2, c, k)), None)
        assert out.shape == (2, length)


class TestMaxPool:
    def test_values(self):
        out, _ = T.maxpool1d(np.array([[1.0, 3, 2, 5]]), 2)
        np.testing.assert_array_equal(out, [[3, 5]])

    def test_floor_rule(self):
        out, _ = T.maxpool1d(np.arange(5.0)[None], 2)
        assert out.shape == (1, 2)

    def test_backward_routes_to_argmax(self):
        x = np.array([[1.0, 3.0]])
        _, idx = T.maxpool1d(x, 2)
        g = 2.5
        np.testing.assert_array_equal(T.maxpool1d_backward(np.array([[g]]), idx, 2, 2), [[0, g]])

    def test_trailing_element_gets_no_gradient(self):
        x = np.array([[1.0, 3.0, 9.0]])
        _, idx = T.maxpool1d(x, 2)
        np.testing.assert_array_equal(T.maxpool1d_backward(np.array([[1.0]]), idx, 2, 3), [[0, 1, 0]])

    @pytest.mark.parametrize("bad", [0, -1])
    def test_bad_pool(self, bad):
        with pytest.raises(ParameterError):
            T.maxpool1d(np.ones((1, 4)), bad)


class TestDense:
    def test_identity(self, rng):
        x = rng.normal(size=5)
        np.testing.assert_allclose(T.dense_forward(x, np.eye(5), np.zeros(5)), x)

    def test_hand_multiplication(self):
        out = T.dense_forward(np.array([1.0, 2.0]), np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2))
        np.testing.assert_array_equal(out, [3, -1])

    def test_gradient(self, rng):
        x, w, b = rng.normal(size=(3, 6)), rng.normal(size=(2, 6)), rng.normal(size=2)
        r = rng.normal(size=(3, 2))
        loss = lambda: float(np.sum(T.dense_forward(x, w, b) * r))
        dx, dw, db = T.dense_backward(r, x, w)
        for analytic, arr in ((dx, x), (dw, w), (db, b)):
            assert rel_err(analytic, central_diff(loss, arr)) < 1e-4

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            T.dense_forward(np.ones(3), np.ones((2, 4)), None)


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(np.array([-1.0, 2.0])), [0, 2])

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(T.softmax(np.array([1.0, 1.0])), [0.5, 0.5])

    def test_softmax_closed_form(self):
        np.testing.assert_allclose(T.softmax(np.array([math.log(3), 0.0])), [0.75, 0.25], rtol=1e-12)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8))
    @settings(max_examples=200)
    def test_softmax_normalized(self, values):
        p = T.softmax(np.array(values))
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(np.isfinite(p))

    def test_softmax_strictly_inside_unit_interval(self, rng):
        p = T.softmax(rng.normal(size=(50, 2)) * 5)
        assert np.all((p > 0) & (p < 1))

    def test_softmax_backward(self, rng):
        v = rng.normal(size=(3, 4))
        r = rng.normal(size=(3, 4))
        loss = lambda: float(np.sum(T.softmax(v) * r))
        assert rel_err(T.softmax_backward(r, T.softmax(v)), central_diff(loss, v)) < 1e-4


class TestBatchNorm:
    def stats(self, shape):
        return np.zeros(shape), np.ones(shape)

    def test_constant_batch(self):
        x = np.full((4, 1, 3), 7.0)
        mm, mv = self.stats((1, 3))
        out, _ = T.batchnorm_forward(x, np.ones((1, 3)), np.zeros((1, 3)), mm, mv, training=True)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_plus_minus_one(self):
        x = np.array([[[-1.0, -1.0]], [[1.0, 1.0]]])
        mm, mv = self.stats((1, 2))
        out, _ = T.batchnorm_forward(x, np.ones((1, 2)), np.zeros((1, 2)), mm, mv, epsilon=1e-5, training=True)
        expected = 1.0 / math.sqrt(1.0 + 1e-5)  # closed form: mean 0, variance 1
        np.testing.assert_allclose(out[0], -expected, rtol=1e-12)
        np.testing.assert_allclose(out[1], expected, rtol=1e-12)
        assert abs(expected - 0.999995) < 1e-6

    def test_moving_statistics_update(self):
        x = np.array([[[2.0]], [[4.0]]])
        mm, mv = np.zeros((1, 1)), np.ones((1, 1))
        T.batchnorm_forward(x, np.ones((1, 1)), np.zeros((1, 1)), mm, mv, momentum=0.9, training=True)
        assert mm[0, 0] == pytest.approx(0.9 * 0 + 0.1 * 3.0)
        assert mv[0, 0] == pytest.approx(0.9 * 1 + 0.1 * 1.0)

    def test_infer_uses_moving_stats(self):
        mm, mv = np.full((1, 1), 2.0), np.full((1, 1), 4.0)
        out, cache = T.batchnorm_forward(np.array([[[6.0]]]), np.ones((1, 1)), np.zeros((1, 1)), mm, mv, epsilon=0.0)
        assert cache is None
        assert out[0, 0, 0] == pytest.approx(2.0)

    def test_backward(self, rng):
        x = rng.normal(size=(5, 2, 3))
        gamma, beta = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        r = rng.normal(size=x.shape)

        def loss():
            mm, mv = self.stats((2, 3))
            return float(np.sum(T.batchnorm_forward(x, gamma, beta, mm, mv, training=True)[0] * r))

        mm, mv = self.stats((2, 3))
        _, cache = T.batchnorm_forward(x, gamma, beta, mm, mv, training=True)
        dx, dg, db = T.batchnorm_backward(r, cache)
        assert rel_err(dx, central_diff(loss, x)) < 1e-4
        assert rel_err(dg, central_diff(loss, gamma)) < 1e-4
        assert rel_err(db, central_diff(loss, beta)) < 1e-4

    def test_single_sample_batch_rejected(self):
        mm, mv = self.stats((1, 3))
        with pytest.raises(ParameterError):
            T.batchnorm_forward(np.ones((1, 1, 3)), np.ones((1, 3)), np.zeros((1, 3)), mm, mv, training=True)


class TestDropout:
    def test_rate_zero_identity(self, rng):
        x = rng.normal(size=100)
        out, _ = T.dropout(x, 0.0, rng, training=True)
        np.testing.assert_array_equal(out, x)

    def test_infer_identity(self, rng):
        x = rng.normal(size=100)
        np.testing.assert_array_equal(T.dropout(x, 0.5, None, training=False)[0], x)

    def test_zero_fraction(self):
        out, _ = T.dropout(np.ones(10_000), 0.25, np.random.default_rng(0), training=True)
        assert abs(np.mean(out == 0) - 0.25) < 0.02

    def test_expectation_preserved(self):
        gen = np.random.default_rng(3)
        mean = np.mean([T.dropout(np.full(1, 2.0), 0.25, gen, training=True)[0][0] for _ in range(10_000)])
        assert abs(mean - 2.0) / 2.0 < 0.02

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_bad_rate(self, rate):
        with pytest.raises(ParameterError):
            T.dropout(np.ones(3), rate, np.random.default_rng(0), training=True)


class TestLoss:
    def test_certain_correct(self):
        loss, _ = T.bce_loss(np.array([1.0, 0.0]), 0)
        assert loss == 0.0

    def test_uniform(self):
        loss, grad = T.bce_loss(np.array([0.5, 0.5]), 0)
        assert loss == pytest.approx(math.log(2), abs=1e-6)
        np.testing.assert_allclose(grad, [-0.5, 0.5])

    def test_logit_gradient_vs_finite_differences(self, rng):
        z = rng.normal(size=(6, 2))
        y = rng.integers(0, 2, 6)
        loss = lambda: T.bce_loss(T.softmax(z), y)[0]
        assert rel_err(T.bce_loss(T.softmax(z), y)[1], central_diff(loss, z)) < 1e-6

    def test_clamp(self):
        loss, _ = T.bce_loss(np.array([0.0, 1.0]), 0)
        assert loss == pytest.approx(-math.log(1e-12))

    def test_l2_term(self):
        w = np.array([[1.0, 2.0]])
        loss, _ = T.bce_loss(np.array([1.0, 0.0]), 0, 0.5, w)
        assert loss == pytest.approx(0.5 * 5)
        np.testing.assert_allclose(T.l2_grad(w, 0.5), [[1.0, 2.0]])


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([0.3, -0.2])}
        T.adam_step(p, {"w": np.zeros(2)}, T.AdamState())
        np.testing.assert_array_equal(p["w"], [0.3, -0.2])

    def test_first_step_closed_form(self):
        p = {"w": np.array([0.0])}
        state = T.AdamState()
        T.adam_step(p, {"w": np.array([1.0])}, state)
        # m_hat = v_hat = 1 on the first step
        assert p["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
        assert state.step_count == 1

    def test_quadratic(self):
        p = {"w": np.array([1.0])}
        state = T.AdamState()
        losses = []
        for _ in range(100):
            losses.append(float(p["w"][0] ** 2))
            T.adam_step(p, {"w": 2 * p["w"]}, state)
        assert abs(p["w"][0]) < 1
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, T.AdamState())

    def test_moments_start_at_zero(self):
        state = T.AdamState()
        assert state.step_count == 0 and not state.m and not state.v


def linear_config():
    return NetworkConfig(layers=(LayerSpec("flatten"), LayerSpec("dense", filter_count=2), LayerSpec("softmax")),
                         input_length=4)


class TestGradientCheck:
    def test_linear_network(self, rng):
        net = build_network(linear_config(), 0)
        err = T.gradient_check(net, rng.normal(size=(3, 1, 4)), np.array([0, 1, 1]))
        assert err < 1e-6

    def test_toy_conv_network(self, rng):
        net = build_network(toy_config(), 3)
        for name in ("conv1.bias", "conv2.bias", "dense1.bias"):
            net.params[name] += rng.normal(scale=0.1, size=net.params[name].shape)
        err = T.gradient_check(net, rng.normal(size=(4, 1, 12)), np.array([0, 1, 0, 1]), l2_lambda=1e-3)
        assert err < 1e-4

    def test_detects_sign_flip(self, rng, monkeypatch):
        net = build_network(toy_config(), 3)
        good = T.conv1d_backward

        def flipped(up, x, w):
            dx, dw, db = good(up, x, w)
            return dx, -dw, db

        monkeypatch.setattr(T, "conv1d_backward", flipped)
        err = T.gradient_check(net, rng.normal(size=(4, 1, 12)), np.array([0, 1, 0, 1]))
        assert err > 0.1

    def test_restores_parameters(self, rng):
        net = build_network(toy_config(), 1)
        before = {k: v.copy() for k, v in net.params.items()}
        T.gradient_check(net, rng.normal(size=(4, 1, 12)), np.array([0, 1, 0, 1]))
        for k in before:
            np.testing.assert_array_equal(net.params[k], before[k])


@pytest.mark.parametrize("seed", range(5))
def test_layers_deterministic(seed):
    def run():
        g = np.random.default_rng(seed)
        x = g.normal(size=(2, 3, 11))
        y = T.conv1d_forward(x, g.normal(size=(4, 3, 5)), g.normal(size=4))
        y, _ = T.maxpool1d(T.relu(y), 2)
        y, _ = T.dropout(y.reshape(2, -1), 0.25, g, training=True)
        return T.softmax(T.dense_forward(y, g.normal(size=(2, y.shape[1])), None))
    assert run().tobytes() == run().tobytes()
