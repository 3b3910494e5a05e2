import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netscope import tensor as T
from oracles import naive_conv2d, numeric_grad, rel_error


def _weighted_sum(out, r):
    return float(np.sum(out * r))


class TestConvForward:
    def test_identity_1x1(self, rng):
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        w = np.eye(3, dtype=np.float32)[:, :, None, None]
        assert np.array_equal(T.conv2d_forward(x, w), x)

    def test_constant_field(self):
        out = T.conv2d_forward(np.ones((1, 1, 5, 5), np.float32), np.ones((1, 1, 3, 3), np.float32))
        assert out.shape == (1, 1, 3, 3)
        assert np.all(out == 9.0)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_matches_naive_oracle_bitwise(self, rng, dtype):
        x = rng.standard_normal((2, 3, 8, 8)).astype(dtype)
        w = rng.standard_normal((4, 3, 3, 3)).astype(dtype)
        b = rng.standard_normal(4).astype(dtype)
        got = T.conv2d_forward(x, w, b, 1, 1)
        assert got.dtype == dtype
        assert np.array_equal(got, naive_conv2d(x, w, b, 1, 1))

    def test_gemm_close_to_ordered(self, rng):
        x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
        w = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        with T.conv_impl("gemm"):
            fast = T.conv2d_forward(x, w, None, 2, 1)
        np.testing.assert_allclose(fast, T.conv2d_forward(x, w, None, 2, 1), rtol=1e-5, atol=1e-5)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"x\(1, 2, 4, 4\).*w\(1, 3, 3, 3\)"):
            T.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_even_kernel_rejected(self):
        with pytest.raises(T.ShapeError):
            T.conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)))

    def test_unknown_impl(self):
        with pytest.raises(ValueError):
            T.set_conv_impl("fft")


class TestConvBackward:
    def test_zero_grad(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        gx, gw, gb = T.conv2d_backward(np.zeros((1, 3, 5, 5)), x, w, 1, 1, with_bias=True)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_adjoint(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        g = rng.standard_normal((2, 3, 4, 4))
        gx, _, _ = T.conv2d_backward(g, x, np.eye(3)[:, :, None, None])
        assert np.array_equal(gx, g)

    @pytest.mark.parametrize("seed", range(6))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        stride, pad, k = [(1, 1, 3), (2, 1, 3), (2, 3, 7), (1, 0, 1), (2, 0, 1), (1, 2, 5)][seed]
        x = rng.standard_normal((2, 2, 7, 7))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(3)
        r = rng.standard_normal(T.conv2d_forward(x, w, b, stride, pad).shape)
        f = lambda: _weighted_sum(T.conv2d_forward(x, w, b, stride, pad), r)
        gx, gw, gb = T.conv2d_backward(r, x, w, stride, pad, with_bias=True)
        assert rel_error(gx, numeric_grad(f, x)) < 1e-6
        assert rel_error(gw, numeric_grad(f, w)) < 1e-6
        assert rel_error(gb, numeric_grad(f, b)) < 1e-6


class TestElementwise:
    def test_relu_values(self):
        assert T.relu_forward(np.array([-1.0]))[0] == 0.0
        assert T.relu_forward(np.array([2.5]))[0] == 2.5

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    def test_relu_nonnegative(self, xs):
        assert np.all(T.relu_forward(np.array(xs)) >= 0)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4), st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4))
    def test_add_commutes_exactly(self, a, b):
        a, b = np.array(a), np.array(b)
        assert np.array_equal(T.add_forward(a, b), T.add_forward(b, a))

    def test_add_zero_branch(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        assert np.array_equal(T.add_forward(x, np.zeros_like(x)), x)

    def test_add_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.add_forward(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 3, 4)))


class TestMaxPool:
    def test_one_hot_gradient(self):
        # every 3x3/s2 window of a 5x5 map covers the centre cell
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        out = T.maxpool_forward(x, 3, 2, 0)
        assert np.all(out == 1.0)
        g = T.maxpool_backward(np.ones_like(out), x, 3, 2, 0)
        assert g[0, 0, 2, 2] == 4.0 and g.sum() == 4.0

    def test_first_occurrence_tie_break(self):
        x = np.zeros((1, 1, 3, 3))
        g = T.maxpool_backward(np.ones((1, 1, 1, 1)), x, 3, 1, 0)
        assert g[0, 0, 0, 0] == 1 and g.sum() == 1

    def test_padding_never_wins(self):
        x = -np.ones((1, 1, 4, 4))
        assert np.all(T.maxpool_forward(x, 3, 2, 1) == -1)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_output_dominates_window(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 6, 6))
        out = T.maxpool_forward(x, 3, 2, 1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
        for u in range(out.shape[2]):
            for v in range(out.shape[3]):
                win = xp[:, :, 2 * u : 2 * u + 3, 2 * v : 2 * v + 3]
                assert np.array_equal(out[:, :, u, v], win.max(axis=(2, 3)))


class TestBatchNorm:
    def test_eval_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        st_ = T.BatchNormState.fresh(3)
        np.testing.assert_allclose(T.batchnorm_forward(x, st_, "eval"), x / np.sqrt(1 + 1e-5), rtol=1e-6)

    def test_train_statistics(self, rng):
        x = rng.normal(3, 2, (8, 3, 5, 5))
        st_ = T.BatchNormState.fresh(3, np.float64)
        st_.gamma[...] = [0.5, 1.0, 2.0]
        st_.beta[...] = [-1.0, 0.0, 1.0]
        y = T.batchnorm_forward(x, st_, "train")
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), st_.beta, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), st_.gamma**2, rtol=1e-4, atol=1e-5)

    def test_running_stats_update(self, rng):
        x = rng.normal(1, 1, (4, 2, 3, 3))
        st_ = T.BatchNormState.fresh(2, np.float64)
        T.batchnorm_forward(x, st_, "train")
        np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        n = 4 * 9
        np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            T.batchnorm_forward(np.zeros((1, 2, 3, 3)), T.BatchNormState.fresh(2), "train")

    @pytest.mark.parametrize("mode", ["train", "eval"])
    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, mode, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 2, 3, 3))
        st_ = T.BatchNormState.fresh(2, np.float64)
        st_.gamma[...] = rng.uniform(0.5, 1.5, 2)
        st_.beta[...] = rng.standard_normal(2)
        st_.running_mean[...] = rng.standard_normal(2)
        st_.running_var[...] = rng.uniform(0.5, 2, 2)
        r = rng.standard_normal(x.shape)
        frozen = (st_.running_mean.copy(), st_.running_var.copy())

        def f():
            s = T.BatchNormState(st_.gamma, st_.beta, frozen[0].copy(), frozen[1].copy())
            return _weighted_sum(T.batchnorm_forward(x, s, mode), r)

        gx, gg, gb = T.batchnorm_backward(r, x, st_, mode)
        assert rel_error(gx, numeric_grad(f, x)) < 1e-6
        assert rel_error(gg, numeric_grad(f, st_.gamma)) < 1e-6
        assert rel_error(gb, numeric_grad(f, st_.beta)) < 1e-6


class TestAffineAndPool:
    def test_linear_fd(self, rng):
        x = rng.standard_normal((3, 4, 1, 1))
        w = rng.standard_normal((5, 4))
        b = rng.standard_normal(5)
        r = rng.standard_normal((3, 5))
        f = lambda: _weighted_sum(T.linear_forward(x, w, b), r)
        gx, gw, gb = T.linear_backward(r, x, w)
        for got, arr in ((gx, x), (gw, w), (gb, b)):
            assert rel_error(got, numeric_grad(f, arr)) < 1e-6

    def test_avgpool_fd(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        r = rng.standard_normal((2, 3, 1, 1))
        f = lambda: _weighted_sum(T.global_avgpool_forward(x), r)
        assert rel_error(T.global_avgpool_backward(r, x.shape), numeric_grad(f, x)) < 1e-6

    def test_cross_entropy_uniform(self):
        loss, grad = T.softmax_cross_entropy(np.zeros((4, 10)), np.array([0, 1, 2, 3]))
        assert loss == pytest.approx(np.log(10))
        np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-12)

    def test_check_finite(self):
        with pytest.raises(FloatingPointError, match="1 non-finite"):
            T.check_finite(np.array([1.0, np.nan]))
