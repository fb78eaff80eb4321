import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avfg import layers as L
from avfg import tensor as T
from avfg.layers import BatchNormState, ConvSpec
from avfg.tensor import ShapeError, Tensor
from helpers import gradcheck, naive_conv

TOL = 1e-4


def random_conv_case(rng, dims, integer=False):
    n = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    kernel = tuple(int(k) for k in rng.integers(1, 4, size=dims))
    stride = tuple(int(s) for s in rng.integers(1, 3, size=dims))
    pad = tuple(int(p) for p in rng.integers(0, 2, size=dims))
    spatial = tuple(int(k + rng.integers(0, 4 if dims == 3 else 7)) for k in kernel)
    shape_x, shape_w = (n, cin) + spatial, (cout, cin) + kernel
    if integer:
        x = rng.integers(-4, 5, size=shape_x).astype(np.float64)
        w = rng.integers(-3, 4, size=shape_w).astype(np.float64)
        b = rng.integers(-2, 3, size=cout).astype(np.float64)
    else:
        x, w, b = rng.standard_normal(shape_x), rng.standard_normal(shape_w), rng.standard_normal(cout)
    return x, w, b, stride, pad


def conv(x, w, b, stride, pad):
    return L.conv_forward(Tensor(x), ConvSpec(Tensor(w), Tensor(b) if b is not None else None, stride, pad)).data


class TestConvOracle:
    @pytest.mark.parametrize("dims", [1, 3])
    def test_exact_on_integer_data(self, dims):
        # integer-valued operands keep every partial sum exact, so any
        # summation order must agree bit for bit
        rng = np.random.default_rng(100 + dims)
        for _ in range(60):
            x, w, b, stride, pad = random_conv_case(rng, dims, integer=True)
            np.testing.assert_array_equal(conv(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad))

    @pytest.mark.parametrize("dims", [1, 3])
    def test_real_valued_data(self, dims):
        rng = np.random.default_rng(200 + dims)
        for _ in range(60):
            x, w, b, stride, pad = random_conv_case(rng, dims)
            np.testing.assert_allclose(conv(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_identity_kernel_1d(self):
        x = np.array([[[1.0, -2.0, 3.5]]])
        np.testing.assert_array_equal(conv(x, np.ones((1, 1, 1)), None, 1, 0), x)

    def test_moving_sum_1d(self):
        x = np.array([[[1.0, 2.0, 3.0]]])
        np.testing.assert_array_equal(conv(x, np.ones((1, 1, 2)), None, 1, 0), [[[3.0, 5.0]]])

    def test_identity_kernel_3d(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 3, 4, 5))
        np.testing.assert_array_equal(conv(x, np.ones((1, 1, 1, 1, 1)), None, 1, 0), x)

    def test_box_kernel_on_constant_3d(self):
        x = np.full((1, 1, 3, 3, 3), 1.5)
        np.testing.assert_array_equal(conv(x, np.ones((1, 1, 2, 2, 2)), None, 1, 0), np.full((1, 1, 2, 2, 2), 12.0))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv(np.zeros((1, 2, 5)), np.zeros((1, 3, 2)), None, 1, 0)

    def test_output_extent_below_one(self):
        with pytest.raises(ShapeError):
            conv(np.zeros((1, 1, 2)), np.zeros((1, 1, 3)), None, 1, 0)

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("dims", [1, 3])
    def test_gradient(self, seed, dims):
        rng = np.random.default_rng(seed)
        x, w, b, stride, pad = random_conv_case(rng, dims)
        probe = rng.standard_normal(naive_conv(x, w, b, stride, pad).shape)

        def build(xt, wt, bt):
            out = L.conv_forward(xt, ConvSpec(wt, bt, stride, pad))
            return T.reduce_sum(T.mul(out, Tensor(probe)))

        assert gradcheck(build, [x, w, b]) < TOL


class TestActivations:
    def test_relu_hand_case(self):
        np.testing.assert_array_equal(L.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        L.relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_sigmoid_values(self):
        assert L.sigmoid(Tensor(0.0)).item() == 0.5
        tiny = L.sigmoid(Tensor(-40.0)).item()
        # 1/(1+e^40) = 4.248354255291589e-18 to double precision
        assert 0 < tiny < 1e-17
        assert tiny == pytest.approx(4.248354255291589e-18, rel=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_activation_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < 1e-3] = 0.5  # relu kink
        w = rng.standard_normal((3, 4))
        for fn in (L.relu, L.sigmoid, L.softplus):
            assert gradcheck(lambda a, fn=fn: T.reduce_sum(T.mul(fn(a), Tensor(w))), [x]) < TOL

    def test_linear_zero_weights(self):
        x = Tensor(np.random.default_rng(0).standard_normal(7))
        assert L.linear(x, Tensor(np.zeros((1, 7))), Tensor(np.zeros(1))).data.tolist() == [0.0]

    def test_linear_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            L.linear(Tensor(np.zeros(5)), Tensor(np.zeros((1, 4))), Tensor(np.zeros(1)))

    @pytest.mark.parametrize("seed", range(20))
    def test_linear_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((2, 5)), rng.standard_normal(2)
        probe = rng.standard_normal((3, 2))
        assert gradcheck(lambda *a: T.reduce_sum(T.mul(L.linear(*a), Tensor(probe))), [x, w, b]) < TOL


class TestSoftmax:
    def test_constant_grid_is_uniform(self):
        out = L.softmax_grid(Tensor(np.full((28, 28), 3.7))).data
        assert np.all(out == out[0, 0])
        assert out[0, 0] == pytest.approx(1 / 784, abs=1e-15)

    def test_saturation(self):
        z = np.zeros((4, 4))
        z[1, 2] = 1000.0
        out = L.softmax_grid(Tensor(z)).data
        assert out[1, 2] == pytest.approx(1.0)
        assert out.sum() - out[1, 2] < 1e-300

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_probability_simplex_and_shift_invariance(self, z, c):
        out = L.softmax_grid(Tensor(z)).data
        assert np.all(out > 0) and np.all(out <= 1)
        assert abs(out.sum() - 1) < 1e-6
        np.testing.assert_allclose(L.softmax_grid(Tensor(z + c)).data, out, rtol=1e-9, atol=1e-15)

    def test_non_finite_propagates(self):
        out = L.softmax_grid(Tensor(np.array([[0.0, np.inf]]))).data
        assert np.isnan(out).any()

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        z, w = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        assert gradcheck(lambda a: T.reduce_sum(T.mul(L.softmax_grid(a), Tensor(w))), [z]) < TOL


class TestMaxpool:
    def test_hand_case(self):
        x = Tensor(np.array([[[1.0, 3.0, 2.0, 0.0]]]), requires_grad=True)
        out = L.maxpool(x, 2, 2)
        np.testing.assert_array_equal(out.data, [[[3.0, 2.0]]])
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, [[[0.0, 1.0, 1.0, 0.0]]])

    def test_ties_go_to_lowest_index(self):
        x = Tensor(np.array([[[[2.0, 2.0], [2.0, 1.0]]]]), requires_grad=True)
        L.maxpool(x, (2, 2)).sum().backward()
        np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_window_too_large(self):
        with pytest.raises(ShapeError):
            L.maxpool(Tensor(np.zeros((1, 1, 3))), 4)

    def test_matches_loop(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 4, 7, 6))
        out = L.maxpool(Tensor(x), (1, 2, 3), (1, 2, 2)).data
        ref = np.zeros(out.shape)
        for idx in itertools.product(*(range(s) for s in out.shape)):
            n, c, t, h, w = idx
            ref[idx] = x[n, c, t, 2 * h : 2 * h + 2, 2 * w : 2 * w + 3].max()
        np.testing.assert_array_equal(out, ref)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.permutation(60).reshape(1, 2, 5, 6) / 7.0  # distinct values, no ties
        w = rng.standard_normal((1, 2, 2, 3))
        assert gradcheck(lambda a: T.reduce_sum(T.mul(L.maxpool(a, 2), Tensor(w))), [x]) < TOL


class TestBatchnorm:
    def test_train_output_is_standardised(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 3, 5)) * 4 + 2
        out = L.batchnorm(Tensor(x), BatchNormState.create(3)).data
        np.testing.assert_allclose(out.mean(axis=(0, 2)), 0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2)), 1, atol=1e-3)

    def test_running_stats_update(self):
        x = np.arange(12.0).reshape(4, 3, 1)
        state = BatchNormState.create(3)
        L.batchnorm(Tensor(x), state)
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2)))
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError):
            L.batchnorm(Tensor(np.zeros((1, 2))), BatchNormState.create(2))

    def test_eval_mode_is_affine(self):
        rng = np.random.default_rng(1)
        state = BatchNormState.create(2)
        state.running_mean[:] = [0.5, -1.0]
        state.running_var[:] = [2.0, 0.3]
        state.scale.data[:] = [1.5, -0.7]
        state.shift.data[:] = [0.1, 0.2]
        state.training = False
        f = lambda a: L.batchnorm(Tensor(a), state).data  # noqa: E731
        a, b = rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 2, 4))
        zero = np.zeros_like(a)
        # affine: f(a + b) - f(0) == (f(a) - f(0)) + (f(b) - f(0))
        np.testing.assert_allclose(f(a + b) - f(zero), f(a) - f(zero) + f(b) - f(zero), atol=1e-12)
        # and independent of batch composition
        np.testing.assert_array_equal(f(a)[:1], f(a[:1]))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_train(self, seed):
        rng = np.random.default_rng(seed)
        x, probe = rng.standard_normal((4, 3, 5)), rng.standard_normal((4, 3, 5))
        g0, b0 = rng.standard_normal(3), rng.standard_normal(3)

        def build(xt, gt, bt):
            state = BatchNormState(gt, bt, np.zeros(3), np.ones(3))
            return T.reduce_sum(T.mul(L.batchnorm(xt, state), Tensor(probe)))

        assert gradcheck(build, [x, g0, b0]) < TOL


class TestAdaptivePool:
    def test_global_mean(self):
        f = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        assert L.adaptive_avg_pool_spatial(Tensor(f), 1, 1).data.item() == 2.5

    def test_identity_when_sizes_match(self):
        f = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(L.adaptive_avg_pool_spatial(Tensor(f), 4, 4).data, f)

    def test_bins_vs_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            h, w = rng.integers(1, 9, size=2)
            oh, ow = rng.integers(1, h + 1), rng.integers(1, w + 1)
            f = rng.standard_normal((2, 3, h, w))
            out = L.adaptive_avg_pool_spatial(Tensor(f), oh, ow).data
            for i in range(oh):
                for j in range(ow):
                    rs = slice(i * h // oh, (i + 1) * h // oh)
                    cs = slice(j * w // ow, (j + 1) * w // ow)
                    np.testing.assert_allclose(out[..., i, j], f[..., rs, cs].mean(axis=(-2, -1)), rtol=1e-12)

    def test_arange_grid_hand_partition(self):
        f = np.arange(16.0).reshape(1, 1, 4, 4)
        out = L.adaptive_avg_pool_spatial(Tensor(f), 2, 2).data[0, 0]
        np.testing.assert_array_equal(out, [[2.5, 4.5], [10.5, 12.5]])

    def test_too_large(self):
        with pytest.raises(ShapeError):
            L.adaptive_avg_pool_spatial(Tensor(np.zeros((1, 1, 2, 2))), 3, 1)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        f, w = rng.standard_normal((2, 2, 5, 7)), rng.standard_normal((2, 2, 2, 3))
        assert gradcheck(lambda a: T.reduce_sum(T.mul(L.adaptive_avg_pool_spatial(a, 2, 3), Tensor(w))), [f]) < TOL


def test_interpolation_matrix_end_points_and_rows():
    m = L.interpolation_matrix(8, 16)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    x = np.arange(8.0)
    y = m @ x
    assert y[0] == 0.0 and y[-1] == 7.0
    np.testing.assert_allclose(np.diff(y), 7 / 15)
