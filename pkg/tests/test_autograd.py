import numpy as np
import pytest

from melnet.autograd import (
    Tensor,
    batch_norm,
    bce_with_logits,
    concat_channels,
    conv2d,
    grad_check,
    leaky_relu,
    no_grad,
    residual_add,
    upsample_nearest_x2,
)


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert Tensor(np.zeros(3)).sigmoid().data == pytest.approx([0.5, 0.5, 0.5])

    def test_exp_at_zero(self):
        assert Tensor([0.0]).exp().data == pytest.approx([1.0])

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            Tensor([1.0, 0.0]).log()

    def test_square(self):
        assert Tensor([3.0, -2.0]).square().data == pytest.approx([9.0, 4.0])

    def test_leaky_relu_values(self):
        out = leaky_relu(Tensor([2.0, -2.0]), 0.1)
        assert out.data == pytest.approx([2.0, -0.2])

    def test_leaky_relu_slope_range(self):
        with pytest.raises(ValueError):
            leaky_relu(Tensor([1.0]), 1.5)

    @pytest.mark.parametrize("fn", [
        lambda x: x.sigmoid().sum(),
        lambda x: x.exp().sum(),
        lambda x: (x.square() + 1.0).log().sum(),
        lambda x: x.square().sum(),
        lambda x: x.leaky_relu(0.1).sum(),
    ])
    def test_gradients_match_finite_differences(self, fn, rng):
        v = rng.normal(size=12)
        x = t64(v + np.sign(v) * 0.5)  # stay away from the leaky-relu kink at 0
        assert grad_check(fn, [x]) < 1e-6


class TestBackward:
    def test_square_gradient(self):
        x = t64(3.0)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_fanout_accumulates(self):
        x = t64(4.0)
        (x + x).backward()
        assert x.grad == pytest.approx(2.0)

    def test_fanout_sums_branch_gradients(self, rng):
        x = t64(rng.normal(size=5))
        y = (x.sigmoid().sum() + x.square().sum()) + x.sum()
        y.backward()
        s = 1 / (1 + np.exp(-x.data))
        expected = s * (1 - s) + 2 * x.data + 1.0
        np.testing.assert_allclose(x.grad, expected, rtol=1e-12)

    def test_non_scalar_root_rejected(self):
        x = t64([1.0, 2.0])
        with pytest.raises(ValueError):
            (x * x).backward()

    def test_consumed_graph_rejected(self):
        x = t64(2.0)
        y = x * x
        y.backward()
        with pytest.raises(RuntimeError):
            y.backward()

    def test_no_grad_suppresses_recording(self):
        x = t64(2.0)
        with no_grad():
            y = x * x
        assert not y.requires_grad

    def test_conv_leaky_chain_matches_finite_differences(self, rng):
        x = t64(rng.normal(size=(1, 1, 4, 4)))
        w = t64(rng.normal(size=(2, 1, 3, 3)))
        err = grad_check(lambda a, b: conv2d(a, b, padding=1).leaky_relu(0.1).sum(), [x, w])
        assert err < 1e-4


class TestConv2d:
    def test_scalar_product(self):
        out = conv2d(t64([[[[2.0]]]]), t64([[[[3.0]]]]))
        assert out.data.ravel() == pytest.approx([6.0])

    def test_identity_kernel(self, rng):
        x = t64(rng.normal(size=(1, 1, 6, 6)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(x, t64(w), stride=1, padding=1)
        np.testing.assert_allclose(out.data, x.data)

    def test_shape_arithmetic(self, rng):
        x = t64(rng.normal(size=(1, 3, 8, 8)))
        w = t64(rng.normal(size=(4, 3, 3, 3)))
        assert conv2d(x, w, stride=2, padding=1).shape == (1, 4, 4, 4)

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            conv2d(t64(rng.normal(size=(1, 2, 4, 4))), t64(rng.normal(size=(1, 3, 1, 1))))

    def test_nonpositive_output_rejected(self, rng):
        with pytest.raises(ValueError):
            conv2d(t64(rng.normal(size=(1, 1, 2, 2))), t64(rng.normal(size=(1, 1, 3, 3))))

    def test_gradients_match_finite_differences(self, rng):
        x = t64(rng.normal(size=(2, 3, 5, 5)))
        w = t64(rng.normal(size=(4, 3, 3, 3)))
        b = t64(rng.normal(size=4))
        err = grad_check(lambda a, ww, bb: conv2d(a, ww, bb, stride=2, padding=1).sum(),
                         [x, w, b])
        assert err < 1e-4

    def test_output_extent_formula_matches_enumeration(self):
        # enumerate valid window placements directly
        for h in range(1, 12):
            for k in (1, 3):
                for pad in (0, 1, 2):
                    for stride in (1, 2):
                        padded = h + 2 * pad
                        if padded < k:
                            continue
                        expected = len(range(0, padded - k + 1, stride))
                        assert (padded - k) // stride + 1 == expected


class TestBatchNorm:
    def _params(self, c, gamma=None, beta=None):
        g = Tensor(np.asarray(gamma if gamma is not None else np.ones(c), dtype=np.float64),
                   requires_grad=True)
        b = Tensor(np.asarray(beta if beta is not None else np.zeros(c), dtype=np.float64),
                   requires_grad=True)
        return g, b, np.zeros(c), np.ones(c)

    def test_constant_input_gives_beta(self):
        g, b, rm, rv = self._params(2, beta=[1.5, -0.5])
        x = t64(np.full((2, 2, 3, 3), 7.0))
        out = batch_norm(x, g, b, rm, rv, training=True)
        np.testing.assert_allclose(out.data[:, 0], 1.5, atol=1e-5)
        np.testing.assert_allclose(out.data[:, 1], -0.5, atol=1e-5)

    def test_standardized_input_is_fixed_point(self, rng):
        x = rng.normal(size=(4, 3, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        g, b, rm, rv = self._params(3)
        out = batch_norm(t64(x), g, b, rm, rv, training=True)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_inference_formula(self):
        g, b, _, _ = self._params(1, gamma=[2.0])
        out = batch_norm(
            t64(np.full((1, 1, 2, 2), 3.0)), g, b,
            np.array([1.0]), np.array([4.0]), eps=1e-12, training=False,
        )
        np.testing.assert_allclose(out.data, 2.0, atol=1e-6)

    def test_running_stats_update(self, rng):
        g, b, rm, rv = self._params(2)
        x = rng.normal(size=(2, 2, 4, 4))
        batch_norm(t64(x), g, b, rm, rv, momentum=0.1, training=True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-10)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-10)

    def test_channel_mismatch_rejected(self, rng):
        g, b, rm, rv = self._params(3)
        with pytest.raises(ValueError):
            batch_norm(t64(rng.normal(size=(1, 2, 2, 2))), g, b, rm[:2], rv[:2])

    def test_training_gradients_match_finite_differences(self, rng):
        x = t64(rng.normal(size=(2, 2, 3, 3)))
        g = t64(rng.normal(size=2) + 1.0)
        b = t64(rng.normal(size=2))

        def f(xx, gg, bb):
            return batch_norm(xx, gg, bb, np.zeros(2), np.ones(2), training=True).square().sum()

        assert grad_check(f, [x, g, b]) < 1e-3

    def test_inference_gradients_match_finite_differences(self, rng):
        x = t64(rng.normal(size=(2, 2, 3, 3)))
        g = t64(rng.normal(size=2) + 1.0)
        b = t64(rng.normal(size=2))
        rm = rng.normal(size=2)
        rv = rng.random(2) + 0.5

        def f(xx, gg, bb):
            return batch_norm(xx, gg, bb, rm, rv, training=False).square().sum()

        assert grad_check(f, [x, g, b]) < 1e-6


class TestUpsampleConcat:
    def test_upsample_definition(self):
        x = t64(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = upsample_nearest_x2(x)
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_allclose(out.data[0, 0], expected)

    def test_upsample_constant(self):
        out = upsample_nearest_x2(t64(np.full((1, 2, 3, 3), 5.0)))
        assert np.all(out.data == 5.0)

    def test_upsample_gradient_counts_blocks(self):
        x = t64(np.ones((1, 1, 2, 2)))
        upsample_nearest_x2(x).sum().backward()
        np.testing.assert_allclose(x.grad, 4.0)

    def test_concat_shapes(self, rng):
        a = t64(rng.normal(size=(1, 2, 4, 4)))
        b = t64(rng.normal(size=(1, 3, 4, 4)))
        assert concat_channels(a, b).shape == (1, 5, 4, 4)

    def test_concat_empty_identity(self, rng):
        a = t64(rng.normal(size=(1, 2, 4, 4)))
        empty = t64(np.zeros((1, 0, 4, 4)))
        np.testing.assert_array_equal(concat_channels(a, empty).data, a.data)

    def test_concat_spatial_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            concat_channels(t64(rng.normal(size=(1, 2, 4, 4))),
                            t64(rng.normal(size=(1, 2, 3, 4))))

    def test_concat_backward_splits(self, rng):
        a = t64(rng.normal(size=(1, 2, 2, 2)))
        b = t64(rng.normal(size=(1, 1, 2, 2)))
        concat_channels(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, 1.0)
        np.testing.assert_allclose(b.grad, 1.0)


class TestResidualAdd:
    def test_identity(self, rng):
        a = t64(rng.normal(size=(2, 3)))
        out = residual_add(a, t64(np.zeros((2, 3))))
        np.testing.assert_array_equal(out.data, a.data)

    def test_values(self):
        out = residual_add(t64([1.0, 2.0]), t64([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [4.0, 6.0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            residual_add(t64([1.0]), t64([1.0, 2.0]))

    def test_gradient_to_both(self, rng):
        a, b = t64(rng.normal(size=4)), t64(rng.normal(size=4))
        residual_add(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, 1.0)
        np.testing.assert_allclose(b.grad, 1.0)


class TestBCE:
    def test_matches_naive_formula(self, rng):
        x = rng.normal(size=16) * 3
        t = (rng.random(16) > 0.5).astype(np.float64)
        out = bce_with_logits(t64(x), t)
        p = 1 / (1 + np.exp(-x))
        naive = -(t * np.log(p) + (1 - t) * np.log(1 - p))
        np.testing.assert_allclose(out.data, naive, rtol=1e-9)

    def test_stable_for_extreme_logits(self):
        out = bce_with_logits(t64([500.0, -500.0]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_gradients(self, rng):
        x = t64(rng.normal(size=8))
        t = rng.random(8)
        assert grad_check(lambda a: bce_with_logits(a, t).sum(), [x]) < 1e-6


class TestGradCheckHarness:
    def test_linear_function_is_exact(self, rng):
        c = rng.normal(size=6)
        x = t64(rng.normal(size=6))
        err = grad_check(lambda a: (a * c).sum(), [x])
        assert err < 1e-10

    def test_sigmoid_chain(self, rng):
        x = t64(rng.normal(size=6))
        err = grad_check(lambda a: a.sigmoid().sigmoid().sum(), [x], step=1e-4)
        assert err < 1e-6

    def test_requires_float64(self, rng):
        x = Tensor(rng.normal(size=3).astype(np.float32), requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda a: a.sum(), [x])


class TestInvariants:
    def test_ops_pass_gradcheck_at_random_points(self, rng):
        # spec-level sweep: every differentiable op at 10 random points
        ops = [
            lambda x: x.sigmoid().sum(),
            lambda x: x.exp().sum(),
            lambda x: x.square().sum(),
            lambda x: (x.square() + 0.5).log().sum(),
            lambda x: x.leaky_relu(0.1).sum(),
            lambda x: upsample_nearest_x2(x.reshape(1, 1, 3, 3)).sum(),
            lambda x: (x * x + x).mean(),
        ]
        for op in ops:
            for trial in range(10):
                v = rng.normal(size=9)
                x = t64(v + np.sign(v) * 0.7)
                assert grad_check(op, [x]) < 1e-4

    def test_values_preserve_dtype(self, rng):
        x = Tensor(rng.normal(size=4).astype(np.float32), requires_grad=True)
        assert (x * 2.0 + 1.0).dtype == np.float32
        assert x.sigmoid().dtype == np.float32
