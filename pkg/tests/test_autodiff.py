"""Engine contracts: forward values, gradients vs finite differences, Adam."""

import numpy as np
import pytest

from riskae import autodiff as ad
from riskae.errors import GraphError, NonFiniteError, ShapeError


class TestForward:
    def test_single_multiply(self):
        w = ad.Tensor(3.0, requires_grad=True)
        x = ad.Tensor(2.0)
        assert (w * x).values == 6.0

    def test_softmax_symmetry(self):
        out = ad.softmax(ad.Tensor([[0.0, 0.0], [0.0, 0.0]]))
        np.testing.assert_allclose(out.values, 0.5)

    def test_mse_two_terms(self):
        x = ad.Tensor([1.0, 0.0])
        t = np.array([0.0, 0.0])
        assert ad.mse(x, t).values == pytest.approx(0.5)

    def test_evaluate_is_deterministic(self):
        def graph(x, w):
            return {"y": ad.tanh(ad.matmul(x, w))}

        rng = np.random.default_rng(0)
        inputs = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2))}
        a = ad.evaluate(graph, inputs)["y"]
        b = ad.evaluate(graph, inputs)["y"]
        assert np.array_equal(a, b)

    def test_evaluate_rejects_non_finite(self):
        def graph(x):
            return {"y": x * np.inf}

        with pytest.raises(NonFiniteError):
            ad.evaluate(graph, {"x": np.ones(2)})

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


class TestBackward:
    def test_power_rule(self):
        w = ad.Tensor(3.0, requires_grad=True)
        y = w * w
        y.backward()
        assert w.grad == pytest.approx(6.0)

    def test_mse_gradient(self):
        x = ad.Tensor([1.0, 0.0], requires_grad=True)
        y = ad.mse(x, np.zeros(2))
        y.backward()
        np.testing.assert_allclose(x.grad, [1.0, 0.0])

    def test_softmax_dot_gradient_matches_fd(self):
        # y = softmax(z) . v at z = [0, 0], v = [1, -1]
        def fn(arrs):
            z = ad.Tensor(arrs["z"], requires_grad=True)
            probs = ad.softmax(ad.reshape(z, (1, 1, 2)))
            return float((probs.values.ravel() * np.array([1.0, -1.0])).sum())

        fd = ad.finite_difference_gradient(fn, {"z": np.zeros((1, 2))}, eps=1e-5)

        z = ad.Tensor(np.zeros((1, 2)), requires_grad=True)
        probs = ad.reshape(ad.softmax(ad.reshape(z, (1, 1, 2))), (1, 2))
        y = ad.sum_(ad.mul(probs, ad.Tensor([[1.0, -1.0]])))
        y.backward()
        np.testing.assert_allclose(z.grad, fd["z"], atol=1e-7)
        np.testing.assert_allclose(z.grad, [[0.5, -0.5]], atol=1e-12)

    def test_unreached_parameter_gets_zero(self):
        w = ad.Tensor(np.ones(3), requires_grad=True)
        unused = ad.Tensor(np.ones(3), requires_grad=True)
        y = ad.sum_(w * 2.0)
        y.backward()
        assert np.array_equal(ad.grad_of(unused), np.zeros(3))

    def test_backward_without_graph_raises(self):
        with pytest.raises(GraphError):
            ad.backward(ad.Tensor(np.ones(2)))

    def test_backward_nonscalar_needs_seed(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        with pytest.raises(GraphError):
            y.backward()
        y2 = x * 2.0
        y2.backward(np.ones(3))
        np.testing.assert_allclose(x.grad, 2.0)

    def test_each_node_visited_once(self):
        # diamond: y = (a + a) * (a + a); grad accumulates 8a
        a = ad.Tensor(3.0, requires_grad=True)
        s = a + a
        y = s * s
        y.backward()
        assert a.grad == pytest.approx(8 * 3.0)


class TestFiniteDifferenceOracle:
    def test_quadratic(self):
        def fn(arrs):
            return float(arrs["w"] ** 2)

        fd = ad.finite_difference_gradient(fn, {"w": np.array(3.0)}, eps=1e-4)
        assert fd["w"] == pytest.approx(6.0, abs=1e-7)

    def test_cubic(self):
        def fn(arrs):
            return float(arrs["w"] ** 3)

        fd = ad.finite_difference_gradient(fn, {"w": np.array(2.0)}, eps=1e-4)
        assert fd["w"] == pytest.approx(12.0, abs=1e-6)

    def test_rejects_nonscalar(self):
        def fn(arrs):
            return arrs["w"] * 2

        with pytest.raises(GraphError):
            ad.finite_difference_gradient(fn, {"w": np.ones(2)}, eps=1e-4)

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            ad.finite_difference_gradient(lambda a: 0.0, {"w": np.ones(1)}, eps=0.0)


def _op_cases(rng):
    """Small randomized graphs exercising every differentiable op.

    Weighting constants are drawn once up front so repeated evaluations
    of the same case (as finite differencing requires) see fixed graphs.
    """
    m = int(rng.integers(2, 8))
    n = int(rng.integers(2, 8))
    k = int(rng.integers(2, 8))
    t = int(rng.integers(3, 8))
    d = int(rng.integers(2, 5))
    mask = np.tril(np.ones((t, t), dtype=bool))
    targets = rng.integers(0, 2, size=(m, 1)).astype(float)
    c_tr = rng.normal(size=(2, m, n))
    c_sum = rng.normal(size=(m,))
    c_mean = rng.normal(size=(m,))
    c_sm = rng.normal(size=(2, t, t))
    c_conv = rng.normal(size=(2, t, 2))
    c_ln = rng.normal(size=(m, n))

    return {
        "add": ({"a": rng.normal(size=(m, n)), "b": rng.normal(size=(1, n))},
                lambda p: ad.mean(p["a"] + p["b"])),
        "sub": ({"a": rng.normal(size=(m, n)), "b": rng.normal(size=(m, n))},
                lambda p: ad.mean(p["a"] - p["b"])),
        "mul": ({"a": rng.normal(size=(m, n)), "b": rng.normal(size=(m, 1))},
                lambda p: ad.mean(p["a"] * p["b"])),
        "neg": ({"a": rng.normal(size=(m,))}, lambda p: ad.mean(-p["a"])),
        "matmul": ({"a": rng.normal(size=(m, k)), "b": rng.normal(size=(k, n))},
                   lambda p: ad.mean(ad.matmul(p["a"], p["b"]))),
        "matmul_batched": ({"a": rng.normal(size=(2, m, k)), "b": rng.normal(size=(k, n))},
                           lambda p: ad.mean(ad.matmul(p["a"], p["b"]))),
        "tanh": ({"a": rng.normal(size=(m, n))}, lambda p: ad.mean(ad.tanh(p["a"]))),
        "sigmoid": ({"a": rng.normal(size=(m, n))}, lambda p: ad.mean(ad.sigmoid(p["a"]))),
        "relu": ({"a": rng.normal(size=(m, n)) + 0.1}, lambda p: ad.mean(ad.relu(p["a"]))),
        "reshape": ({"a": rng.normal(size=(m, n))},
                    lambda p: ad.mean(ad.reshape(p["a"], (n * m,)))),
        "transpose": ({"a": rng.normal(size=(m, n, 2))},
                      lambda p: ad.mean(ad.transpose(p["a"], (2, 0, 1)) * c_tr)),
        "sum": ({"a": rng.normal(size=(m, n))},
                lambda p: ad.mean(ad.sum_(p["a"], axis=1) * c_sum)),
        "mean_axis": ({"a": rng.normal(size=(m, n, 2))},
                      lambda p: ad.mean(ad.mean(p["a"], axis=(1, 2)) * c_mean)),
        "masked_softmax": ({"s": rng.normal(size=(2, t, t))},
                           lambda p: ad.mean(ad.masked_softmax(p["s"], mask) * c_sm)),
        "attention": ({"q": rng.normal(size=(2, t, d)), "k": rng.normal(size=(2, t, d)),
                       "v": rng.normal(size=(2, t, d))},
                      lambda p: ad.mean(ad.attention(p["q"], p["k"], p["v"], mask))),
        "conv1d": ({"x": rng.normal(size=(2, t, 3)), "w": rng.normal(size=(3, 3, 2))},
                   lambda p: ad.mean(ad.conv1d(p["x"], p["w"]) * c_conv)),
        "conv1d_transpose": ({"x": rng.normal(size=(2, t, 3)), "w": rng.normal(size=(3, 2, 3))},
                             lambda p: ad.mean(ad.conv1d_transpose(p["x"], p["w"]) * c_conv)),
        "layer_norm": ({"x": rng.normal(size=(m, n)), "g": rng.normal(size=(n,)),
                        "b": rng.normal(size=(n,))},
                       lambda p: ad.mean(ad.layer_norm(p["x"], p["g"], p["b"]) * c_ln)),
        "bce_with_logits": ({"z": rng.normal(size=(m, 1))},
                            lambda p: ad.bce_with_logits(p["z"], targets)),
    }


ALL_OPS = sorted(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", ALL_OPS)
def test_gradients_match_finite_differences(op):
    """Analytic gradients within 1e-4 relative error of central differences."""
    worst = 0.0
    for trial in range(10):
        rng = np.random.default_rng(1000 + trial)
        params, fn = _op_cases(rng)[op]
        worst = max(worst, ad.gradient_check(fn, params, eps=1e-5))
    assert worst < 1e-4, f"{op}: max rel err {worst:.2e}"


class TestAdam:
    def test_first_step_magnitude(self):
        # with constant gradient the first bias-corrected step is ~lr
        p = {"w": ad.Tensor(1.0, requires_grad=True)}
        state = ad.AdamState(learning_rate=1e-3)
        ad.adam_step(p, {"w": np.array(0.5)}, state)
        assert p["w"].values == pytest.approx(0.999, abs=1e-6)
        assert state.step == 1

    def test_zero_gradient_keeps_params(self):
        p = {"w": ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        state = ad.AdamState()
        ad.adam_step(p, {"w": np.ones(2)}, state)
        before = p["w"].values.copy()
        ad.adam_step(p, {"w": np.zeros(2)}, state)
        # moments decay but the zero gradient still moves params slightly
        # via the remembered first moment; a fresh state must not move at all
        fresh = {"w": ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        ad.adam_step(fresh, {"w": np.zeros(2)}, ad.AdamState())
        np.testing.assert_allclose(fresh["w"].values, [1.0, -2.0])
        assert not np.array_equal(before, p["w"].values)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            p = {"w": ad.Tensor(rng.normal(size=(3, 3)), requires_grad=True)}
            state = ad.AdamState()
            for _ in range(10):
                ad.adam_step(p, {"w": rng.normal(size=(3, 3))}, state)
            return p["w"].values

        assert np.array_equal(run(), run())

    def test_shape_mismatch(self):
        p = {"w": ad.Tensor(np.ones(3), requires_grad=True)}
        with pytest.raises(ShapeError):
            ad.adam_step(p, {"w": np.ones(4)}, ad.AdamState())
