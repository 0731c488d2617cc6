"""Tensor-core tests: op examples, brute-force oracles, gradient checks."""

import numpy as np
import pytest

import attsf.autodiff as ad
from attsf.autodiff import (Rng, ShapeError, Variable, backward,
                            concat_channels, conv2d, init_he_normal,
                            matmul_batched, maxpool2d, mul_broadcast,
                            pool_global, softmax_lastaxis, upsample_nearest)

import oracles


def rand(shape, rng, dtype=np.float64, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape).astype(dtype)


def grad_check(build, x0, rtol=1e-4, n_coords=10, seed=0, h=1e-4):
    """build(x_var) -> scalar Variable; compare grads at random coords."""
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, np.float64)
    x = Variable(x0, requires_grad=True)
    loss = build(x)
    backward(loss)
    coords = oracles.random_coords(x0.shape, n_coords, rng)
    fd = oracles.finite_diff_grad(
        lambda xv: float(build(Variable(xv)).value), x0, coords, h=h)
    for idx, want in fd.items():
        got = x.grad[idx]
        assert got == pytest.approx(want, rel=rtol, abs=1e-7), \
            f"coord {idx}: analytic {got} vs fd {want}"


class TestConv2d:
    def test_all_ones_same_padding(self):
        x = np.ones((1, 3, 3, 1), np.float32)
        w = np.ones((3, 3, 1, 1), np.float32)
        out = conv2d(Variable(x), Variable(w)).value[0, :, :, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rand((2, 5, 4, 3), rng, np.float32)
        w = np.zeros((1, 1, 3, 3), np.float32)
        for c in range(3):
            w[0, 0, c, c] = 1.0
        out = conv2d(Variable(x), Variable(w)).value
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"),
                                                (1, "valid")])
    def test_matches_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(2)
        x = rand((1, 8, 8, 3), rng, np.float32)
        w = rand((3, 3, 3, 4), rng, np.float32)
        b = rand((4,), rng, np.float32)
        got = conv2d(Variable(x), Variable(w), Variable(b),
                     stride=stride, padding=padding).value
        want = oracles.conv2d_loops(x, w, b, stride=stride, padding=padding)
        assert np.abs(got - want).max() < 1e-5

    def test_same_padding_output_shape(self):
        x = Variable(np.zeros((2, 7, 5, 1), np.float32))
        w = Variable(np.zeros((3, 3, 1, 2), np.float32))
        assert conv2d(x, w, stride=2).shape == (2, 4, 3, 2)

    def test_channel_mismatch_names_axes(self):
        x = Variable(np.zeros((1, 4, 4, 3), np.float32))
        w = Variable(np.zeros((3, 3, 2, 1), np.float32))
        with pytest.raises(ShapeError, match=r"input channel axis \(3\).*\(2\)"):
            conv2d(x, w)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x0 = rand((1, 5, 5, 2), rng)
        w0 = rand((3, 3, 2, 3), rng)
        b0 = rand((3,), rng)
        grad_check(lambda x: ad.sum_all(
            ad.mul(conv2d(x, Variable(w0), Variable(b0)),
                   conv2d(x, Variable(w0), Variable(b0)))), x0)
        x_const = Variable(x0)
        grad_check(lambda w: ad.sum_all(
            ad.mul(conv2d(x_const, w, Variable(b0)),
                   conv2d(x_const, w, Variable(b0)))), w0)


class TestMaxpool:
    def test_basic(self):
        x = np.array([[1, 2], [3, 4]], np.float32).reshape(1, 2, 2, 1)
        out = maxpool2d(Variable(x), 2, 2).value
        assert out.reshape(()) == 4.0

    def test_constant_input(self):
        x = np.full((1, 4, 4, 2), 0.7, np.float32)
        out = maxpool2d(Variable(x), 2, 2).value
        np.testing.assert_array_equal(out, np.full((1, 2, 2, 2), 0.7, np.float32))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rand((1, 8, 8, 2), rng, np.float32)
        for window, stride in [(2, 2), (3, 2), (2, 1)]:
            got = maxpool2d(Variable(x), window, stride).value
            want = oracles.maxpool2d_loops(x, window, stride)
            np.testing.assert_array_equal(got, want)

    def test_window_too_large(self):
        with pytest.raises(ShapeError, match="exceeds"):
            maxpool2d(Variable(np.zeros((1, 3, 3, 1), np.float32)), 4, 1)

    def test_tie_routes_to_first_in_scan_order(self):
        x = np.full((1, 2, 2, 1), 5.0)
        y = maxpool2d(Variable(x, requires_grad=True), 2, 2)
        v = Variable(x, requires_grad=True)
        y = maxpool2d(v, 2, 2)
        backward(ad.sum_all(y))
        want = np.zeros((1, 2, 2, 1))
        want[0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(v.grad, want)

    def test_gradients(self):
        rng = np.random.default_rng(5)
        x0 = rand((1, 6, 6, 2), rng)
        grad_check(lambda x: ad.sum_all(ad.mul(maxpool2d(x, 2, 2),
                                               maxpool2d(x, 2, 2))), x0)


class TestUpsample:
    def test_replicates(self):
        x = np.array([[1.0]], np.float32).reshape(1, 1, 1, 1)
        out = upsample_nearest(Variable(x), 2).value
        np.testing.assert_array_equal(out, np.ones((1, 2, 2, 1), np.float32))

    def test_factor_one_identity(self):
        x = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
        np.testing.assert_array_equal(upsample_nearest(Variable(x), 1).value, x)

    def test_bad_factor(self):
        with pytest.raises(ShapeError):
            upsample_nearest(Variable(np.zeros((1, 2, 2, 1))), 0)

    def test_sum_gradient_is_factor_squared(self):
        x = Variable(np.zeros((1, 3, 4, 2)), requires_grad=True)
        backward(ad.sum_all(upsample_nearest(x, 3)))
        np.testing.assert_array_equal(x.grad, np.full((1, 3, 4, 2), 9.0))

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x0 = rand((1, 3, 3, 2), rng)
        grad_check(lambda x: ad.sum_all(ad.mul(upsample_nearest(x, 2),
                                               upsample_nearest(x, 2))), x0)


class TestActivation:
    def test_relu_values(self):
        out = ad.activation(Variable(np.array([-1.5, 2.0])), "relu").value
        np.testing.assert_array_equal(out, [0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Variable(np.array([0.0]))).value[0] == 0.5

    def test_leaky_relu_slope(self):
        out = ad.leaky_relu(Variable(np.array([-1.0])), 0.2).value
        assert out[0] == pytest.approx(-0.2)

    def test_sigmoid_range(self):
        x = np.linspace(-30, 30, 101)
        out = ad.sigmoid(Variable(x)).value
        assert np.all(out > 0) and np.all(out < 1)

    @pytest.mark.parametrize("mode", ["relu", "leaky_relu", "sigmoid"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(7)
        x0 = rand((4, 5), rng) + 0.01  # keep clear of the relu kink
        grad_check(lambda x: ad.sum_all(
            ad.mul(ad.activation(x, mode), ad.activation(x, mode))), x0)


class TestPoolGlobal:
    def test_constant(self):
        x = Variable(np.full((2, 3, 3, 4), 1.25))
        for mode in ("avg", "max"):
            for axis in ("spatial", "channel"):
                out = pool_global(x, mode, axis).value
                assert np.all(out == 1.25)

    def test_avg_spatial(self):
        x = np.array([[1, 2], [3, 4]], np.float64).reshape(1, 2, 2, 1)
        assert pool_global(Variable(x), "avg", "spatial").value.item() == 2.5

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        x = rand((2, 4, 5, 3), rng)
        for mode in ("avg", "max"):
            for axis in ("spatial", "channel"):
                got = pool_global(Variable(x), mode, axis).value
                want = oracles.pool_global_loops(x, mode, axis)
                np.testing.assert_array_equal(got, want)

    def test_shapes(self):
        x = Variable(np.zeros((2, 4, 5, 3)))
        assert pool_global(x, "avg", "spatial").shape == (2, 1, 1, 3)
        assert pool_global(x, "max", "channel").shape == (2, 4, 5, 1)

    @pytest.mark.parametrize("mode,axis", [("avg", "spatial"),
                                           ("avg", "channel"),
                                           ("max", "spatial"),
                                           ("max", "channel")])
    def test_gradients(self, mode, axis):
        rng = np.random.default_rng(9)
        x0 = rand((1, 3, 4, 2), rng)
        grad_check(lambda x: ad.sum_all(
            ad.mul(pool_global(x, mode, axis), pool_global(x, mode, axis))), x0)


class TestConcat:
    def test_channel_sum(self):
        a = Variable(np.zeros((1, 2, 2, 2)))
        b = Variable(np.zeros((1, 2, 2, 3)))
        assert concat_channels([a, b]).shape == (1, 2, 2, 5)

    def test_single_input_identity(self):
        x = np.arange(8.0).reshape(1, 2, 2, 2)
        np.testing.assert_array_equal(concat_channels([Variable(x)]).value, x)

    def test_mismatched_shapes_listed(self):
        a = Variable(np.zeros((1, 2, 2, 1)))
        b = Variable(np.zeros((1, 3, 2, 1)))
        with pytest.raises(ShapeError, match=r"\(1, 2, 2, 1\).*\(1, 3, 2, 1\)"):
            concat_channels([a, b])

    def test_backward_slices(self):
        a = Variable(np.ones((1, 2, 2, 2)), requires_grad=True)
        b = Variable(np.ones((1, 2, 2, 3)), requires_grad=True)
        scale = Variable(np.concatenate(
            [np.full((1, 2, 2, 2), 2.0), np.full((1, 2, 2, 3), 3.0)], axis=-1))
        backward(ad.sum_all(ad.mul(concat_channels([a, b]), scale)))
        np.testing.assert_array_equal(a.grad, np.full((1, 2, 2, 2), 2.0))
        np.testing.assert_array_equal(b.grad, np.full((1, 2, 2, 3), 3.0))

    def test_gradients(self):
        rng = np.random.default_rng(10)
        x0 = rand((1, 2, 2, 4), rng)
        other = Variable(rand((1, 2, 2, 3), rng))
        grad_check(lambda x: ad.sum_all(
            ad.mul(concat_channels([x, other]), concat_channels([x, other]))),
            x0)


class TestMulBroadcast:
    def test_ones_identity(self):
        x = np.arange(24.0).reshape(1, 2, 3, 4)
        mask = np.ones((1, 1, 1, 4))
        np.testing.assert_array_equal(
            mul_broadcast(Variable(x), Variable(mask)).value, x)

    def test_zero_mask(self):
        x = np.arange(24.0).reshape(1, 2, 3, 4)
        mask = np.zeros((1, 2, 3, 1))
        assert np.all(mul_broadcast(Variable(x), Variable(mask)).value == 0)

    def test_non_broadcastable(self):
        with pytest.raises(ShapeError):
            mul_broadcast(Variable(np.zeros((1, 2, 3, 4))),
                          Variable(np.zeros((1, 2, 5, 4))))

    @pytest.mark.parametrize("mask_shape", [(1, 1, 1, 4), (1, 2, 3, 1)])
    def test_mask_gradient_vs_finite_diff(self, mask_shape):
        rng = np.random.default_rng(11)
        a = Variable(rand((1, 2, 3, 4), rng))
        m0 = rand(mask_shape, rng)
        grad_check(lambda m: ad.sum_all(
            ad.mul(mul_broadcast(a, m), mul_broadcast(a, m))), m0)


class TestMatmulSoftmax:
    def test_identity_matmul(self):
        eye = Variable(np.eye(2)[None])
        b = Variable(np.random.default_rng(12).normal(size=(1, 2, 5)))
        np.testing.assert_allclose(matmul_batched(eye, b).value, b.value)

    def test_softmax_uniform(self):
        out = softmax_lastaxis(Variable(np.zeros((1, 2)))).value
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_matmul_matches_loop_oracle(self):
        rng = np.random.default_rng(13)
        a = rand((2, 4, 3), rng, np.float32)
        b = rand((2, 3, 5), rng, np.float32)
        got = matmul_batched(Variable(a), Variable(b)).value
        want = oracles.matmul_loops(a, b)
        assert np.abs(got - want).max() < 1e-5

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul_batched(Variable(np.zeros((1, 2, 3))),
                           Variable(np.zeros((1, 4, 5))))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(14)
        x = rand((3, 7, 9), rng, np.float32, -20, 20)
        out = softmax_lastaxis(Variable(x)).value
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-5)

    def test_softmax_stability(self):
        out = softmax_lastaxis(Variable(np.array([[1000.0, 1000.0]]))).value
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_gradients(self):
        rng = np.random.default_rng(15)
        a0 = rand((2, 3, 4), rng)
        b = Variable(rand((2, 4, 3), rng))
        grad_check(lambda a: ad.sum_all(ad.mul(
            softmax_lastaxis(matmul_batched(a, b)),
            softmax_lastaxis(matmul_batched(a, b)))), a0)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Variable(np.random.default_rng(16).normal(size=(3, 4)),
                     requires_grad=True)
        backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic_grad(self):
        xv = np.random.default_rng(17).normal(size=(3, 4))
        x = Variable(xv, requires_grad=True)
        backward(ad.sum_all(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * xv)

    def test_non_scalar_loss_rejected(self):
        x = Variable(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            backward(x)

    def test_unreachable_parameter_gets_zero(self):
        x = Variable(np.ones(3), requires_grad=True)
        orphan = Variable(np.ones(2), requires_grad=True)
        backward(ad.sum_all(x), parameters=[x, orphan])
        np.testing.assert_array_equal(orphan.grad, np.zeros(2))

    def test_diamond_graph_accumulates(self):
        xv = np.array([2.0, 3.0])
        x = Variable(xv, requires_grad=True)
        y = ad.add(ad.mul(x, x), x)  # d/dx = 2x + 1
        backward(ad.sum_all(y))
        np.testing.assert_allclose(x.grad, 2 * xv + 1)

    def test_composite_network_finite_differences(self):
        # >= 5 mixed ops: conv, relu, maxpool, concat, mul mask, sum
        rng = np.random.default_rng(18)
        w0 = rand((3, 3, 2, 2), rng)
        mask = Variable(rand((1, 1, 1, 4), rng))

        def net(x):
            c = ad.relu(conv2d(x, Variable(w0)))
            p = maxpool2d(c, 2, 2)
            cat = concat_channels([p, ad.sigmoid(p)])
            return ad.mean_all(mul_broadcast(cat, mask))

        x0 = rand((1, 6, 6, 2), rng)
        grad_check(net, x0)


class TestInitHeNormal:
    def test_stddev_from_fan_in(self):
        # fan_in 8 -> stddev 0.5; checked statistically at large count
        rng = Rng(0)
        t = init_he_normal((2, 2, 2, 50000), rng)
        assert np.std(t) == pytest.approx(0.5, rel=0.03)

    def test_deterministic(self):
        a = init_he_normal((3, 3, 4, 8), Rng(123))
        b = init_he_normal((3, 3, 4, 8), Rng(123))
        assert a.tobytes() == b.tobytes()

    def test_large_sample_stddev(self):
        rng = Rng(1)
        t = init_he_normal((3, 3, 2, 100000 // 18 + 1), rng)
        want = np.sqrt(2.0 / 18.0)
        assert np.std(t) == pytest.approx(want, rel=0.03)


class TestRng:
    def test_state_roundtrip(self):
        rng = Rng(42)
        rng.normal(0, 1, (10,))
        state = rng.get_state()
        a = rng.uniform(0, 1, (5,))
        rng2 = Rng(0)
        rng2.set_state(state)
        b = rng2.uniform(0, 1, (5,))
        assert a.tobytes() == b.tobytes()

    def test_same_seed_same_stream(self):
        assert Rng(7).normal(0, 1, (16,)).tobytes() == \
            Rng(7).normal(0, 1, (16,)).tobytes()


class TestDeterminism:
    def test_ops_bit_identical_across_runs(self):
        def run():
            rng = Rng(5)
            x = Variable(rng.normal(0, 1, (1, 8, 8, 3)))
            w = Variable(rng.normal(0, 1, (3, 3, 3, 4)))
            y = maxpool2d(ad.relu(conv2d(x, w)), 2, 2)
            return y.value.tobytes()

        assert run() == run()
