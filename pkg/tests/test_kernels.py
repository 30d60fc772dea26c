"""The numba and numpy kernel backends must agree to round-off."""

import numpy as np
import pytest

from riskae.kernels import numpy_impl

try:
    from riskae.kernels import numba_impl

    BACKENDS = [("numpy", numpy_impl), ("numba", numba_impl)]
except ImportError:
    numba_impl = None
    BACKENDS = [("numpy", numpy_impl)]


def random_mask(rng, t):
    mask = rng.random((t, t)) < 0.6
    mask[np.arange(t), np.arange(t)] = True
    return mask


@pytest.mark.skipif(numba_impl is None, reason="numba unavailable")
class TestBackendAgreement:
    def test_masked_softmax(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            scores = rng.normal(size=(4, 12, 12))
            mask = random_mask(rng, 12)
            a = numpy_impl.masked_softmax_fwd(scores, mask)
            b = numba_impl.masked_softmax_fwd(scores, mask)
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)
            dprobs = rng.normal(size=a.shape)
            da = numpy_impl.masked_softmax_bwd(dprobs, a)
            db = numba_impl.masked_softmax_bwd(dprobs, b)
            np.testing.assert_allclose(da, db, rtol=1e-12, atol=1e-14)

    def test_attention(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            q, k, v = (rng.normal(size=(3, 10, 4)) for _ in range(3))
            mask = random_mask(rng, 10)
            scale = 1.0 / 2.0
            out_np, probs_np = numpy_impl.attention_fwd(q, k, v, mask, scale)
            out_nb, probs_nb = numba_impl.attention_fwd(q, k, v, mask, scale)
            np.testing.assert_allclose(out_np, out_nb, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(probs_np, probs_nb, rtol=1e-12, atol=1e-14)
            dout = rng.normal(size=out_np.shape)
            g_np = numpy_impl.attention_bwd(dout, probs_np, q, k, v, scale)
            g_nb = numba_impl.attention_bwd(dout, probs_nb, q, k, v, scale)
            for a, b in zip(g_np, g_nb):
                np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)

    def test_layer_norm(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(20, 9))
        gain = rng.normal(size=9)
        bias = rng.normal(size=9)
        ya, ma, ra = numpy_impl.layer_norm_fwd(x, gain, bias, 1e-5)
        yb, mb, rb = numba_impl.layer_norm_fwd(x, gain, bias, 1e-5)
        np.testing.assert_allclose(ya, yb, rtol=1e-12, atol=1e-14)
        dy = rng.normal(size=x.shape)
        ga = numpy_impl.layer_norm_bwd(dy, x, gain, ma, ra)
        gb = numba_impl.layer_norm_bwd(dy, x, gain, mb, rb)
        for a, b in zip(ga, gb):
            np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-13)


@pytest.mark.parametrize("name,impl", BACKENDS)
class TestKernelContracts:
    def test_softmax_rows_sum_to_one(self, name, impl):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=(6, 15, 15))
        mask = random_mask(rng, 15)
        probs = impl.masked_softmax_fwd(scores, mask)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_blocked_entries_exactly_zero(self, name, impl):
        rng = np.random.default_rng(4)
        scores = rng.normal(size=(2, 8, 8))
        mask = random_mask(rng, 8)
        probs = impl.masked_softmax_fwd(scores, mask)
        assert np.all(probs[:, ~mask] == 0.0)

    def test_attention_matches_composition(self, name, impl):
        rng = np.random.default_rng(5)
        q, k, v = (rng.normal(size=(2, 7, 3)) for _ in range(3))
        mask = random_mask(rng, 7)
        scale = 1.0 / np.sqrt(3.0)
        out, probs = impl.attention_fwd(q, k, v, mask, scale)
        ref_probs = numpy_impl.masked_softmax_fwd(
            np.matmul(q, np.swapaxes(k, -1, -2)) * scale, mask
        )
        np.testing.assert_allclose(probs, ref_probs, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(out, np.matmul(ref_probs, v), rtol=1e-12, atol=1e-14)
