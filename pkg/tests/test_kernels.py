import numpy as np
import pytest

from melnet import kernels
from melnet.kernels import fallback, get_impl

from reference_impls import naive_conv2d

IMPLS = ["numpy"] + (["compiled"] if kernels.HAS_COMPILED else [])


def random_case(rng, dtype=np.float64):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 7))
    co = int(rng.integers(1, 7))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.choice([0, 1])) if k == 3 else 0
    h = int(rng.integers(k, 9))
    w = int(rng.integers(k, 9))
    x = rng.normal(size=(n, c, h, w)).astype(dtype)
    wt = rng.normal(size=(co, c, k, k)).astype(dtype)
    return x, wt, stride, pad


@pytest.mark.parametrize("impl", IMPLS)
class TestForwardAgainstNaive:
    def test_random_shapes(self, impl, rng):
        mod = get_impl(impl)
        for _ in range(30):
            x, w, stride, pad = random_case(rng)
            got = mod.conv2d_forward(x, w, stride, pad)
            want = naive_conv2d(x, w, stride, pad)
            np.testing.assert_allclose(got, want, atol=1e-6)

    def test_float32_agreement(self, impl, rng):
        mod = get_impl(impl)
        x, w, stride, pad = random_case(rng, dtype=np.float32)
        got = mod.conv2d_forward(x, w, stride, pad)
        want = naive_conv2d(x.astype(np.float64), w.astype(np.float64), stride, pad)
        assert got.dtype == np.float32
        np.testing.assert_allclose(got, want, atol=1e-4)


@pytest.mark.parametrize("impl", IMPLS)
class TestBackwardAgainstNaive:
    def test_input_gradient(self, impl, rng):
        # d/dx sum(conv) computed by perturbing the naive oracle
        mod = get_impl(impl)
        x, w, stride, pad = random_case(rng)
        y = naive_conv2d(x, w, stride, pad)
        dy = rng.normal(size=y.shape)
        got = mod.conv2d_backward_input(w, dy, x.shape, stride, pad)
        eps = 1e-6
        flat = x.reshape(-1)
        for idx in rng.choice(flat.size, size=min(12, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = (naive_conv2d(x, w, stride, pad) * dy).sum()
            flat[idx] = orig - eps
            down = (naive_conv2d(x, w, stride, pad) * dy).sum()
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            assert got.reshape(-1)[idx] == pytest.approx(numeric, abs=1e-5)

    def test_weight_gradient(self, impl, rng):
        mod = get_impl(impl)
        x, w, stride, pad = random_case(rng)
        y = naive_conv2d(x, w, stride, pad)
        dy = rng.normal(size=y.shape)
        got = mod.conv2d_backward_weight(x, dy, w.shape, stride, pad)
        eps = 1e-6
        flat = w.reshape(-1)
        for idx in rng.choice(flat.size, size=min(12, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = (naive_conv2d(x, w, stride, pad) * dy).sum()
            flat[idx] = orig - eps
            down = (naive_conv2d(x, w, stride, pad) * dy).sum()
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            assert got.reshape(-1)[idx] == pytest.approx(numeric, abs=1e-5)


@pytest.mark.skipif(not kernels.HAS_COMPILED, reason="extension not built")
class TestBackendAgreement:
    def test_paths_agree(self, rng):
        compiled = get_impl("compiled")
        for _ in range(20):
            x, w, stride, pad = random_case(rng)
            np.testing.assert_allclose(
                compiled.conv2d_forward(x, w, stride, pad),
                fallback.conv2d_forward(x, w, stride, pad),
                atol=1e-10,
            )
            dy = rng.normal(size=fallback.conv2d_forward(x, w, stride, pad).shape)
            np.testing.assert_allclose(
                compiled.conv2d_backward_input(w, dy, x.shape, stride, pad),
                fallback.conv2d_backward_input(w, dy, x.shape, stride, pad),
                atol=1e-10,
            )
            np.testing.assert_allclose(
                compiled.conv2d_backward_weight(x, dy, w.shape, stride, pad),
                fallback.conv2d_backward_weight(x, dy, w.shape, stride, pad),
                atol=1e-10,
            )


class TestDispatch:
    def test_out_extent(self):
        assert kernels.out_extent(8, 3, 2, 1) == 4
        assert kernels.out_extent(640, 3, 2, 1) == 320

    def test_dispatcher_matches_naive(self, rng):
        x, w, stride, pad = random_case(rng)
        np.testing.assert_allclose(
            kernels.conv2d_forward(x, w, stride, pad),
            naive_conv2d(x, w, stride, pad),
            atol=1e-6,
        )
