"""Gradient and second-order checks for the reverse-mode engine and op kinds."""

import unittest

import numpy as np

from snows import autodiff as ad
from snows import tensor as T
from snows.ops import OPS, conv2d_direct


def numeric_grad(fn, x, h=1e-6):
    """Central differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return g


class GradCheck(unittest.TestCase):
    def assert_grad_matches(self, build, x, rtol=1e-5, atol=1e-7):
        var = ad.variable(x)
        (analytic,) = ad.grad(build(var), [var])

        def scalar(value):
            with ad.no_grad():
                return float(build(ad.constant(value)).value)

        np.testing.assert_allclose(analytic.value, numeric_grad(scalar, x.copy()), rtol=rtol, atol=atol)


class TestPrimitives(GradCheck):
    def setUp(self):
        self.rng = T.Rng(11)

    def test_dense_gelu_chain(self):
        a = self.rng.normal((5, 4))
        w = self.rng.normal((4, 3))
        self.assert_grad_matches(lambda v: ad.squared_error(ad.gelu(ad.matmul(ad.constant(a), v)), np.ones((5, 3))), w)

    def test_softmax_and_log_softmax(self):
        x = self.rng.normal((3, 5))
        weights = ad.constant(self.rng.normal((3, 5)))
        self.assert_grad_matches(lambda v: ad.vdot(ad.softmax(v), weights), x)
        self.assert_grad_matches(lambda v: ad.vdot(ad.log_softmax(v), weights), x)

    def test_softmax_rows_sum_to_one(self):
        x = self.rng.normal((4, 6)) * 50
        with ad.no_grad():
            p = ad.softmax(ad.constant(x)).value
        np.testing.assert_allclose(p.sum(axis=-1), np.ones(4), atol=1e-12)

    def test_take_and_embed_range(self):
        x = self.rng.normal((7,))
        weights = ad.constant(self.rng.normal((3,)))
        self.assert_grad_matches(lambda v: ad.vdot(ad.take_range(v, 2, 5), weights), x)

    def test_reshape_transpose_expand(self):
        x = self.rng.normal((2, 3))
        target = self.rng.normal((3, 4, 2))

        def build(v):
            moved = ad.transpose(ad.reshape(v, (3, 1, 2)), (0, 1, 2))
            return ad.squared_error(ad.expand(moved, (3, 4, 2)), target)

        self.assert_grad_matches(build, x)

    def test_unused_input_gets_zero_gradient(self):
        a = ad.variable(np.ones(3))
        b = ad.variable(np.ones(3))
        ga, gb = ad.grad(ad.vdot(a, a), [a, b])
        np.testing.assert_array_equal(ga.value, 2 * np.ones(3))
        np.testing.assert_array_equal(gb.value, np.zeros(3))

    def test_no_grad_records_nothing(self):
        v = ad.variable(np.ones(2))
        with ad.no_grad():
            out = ad.mul(v, v)
        self.assertFalse(out.requires_grad)
        self.assertTrue(ad.is_recording())


class TestOps(GradCheck):
    def setUp(self):
        self.rng = T.Rng(5)

    def test_conv_matches_direct_summation(self):
        x = self.rng.normal((2, 3, 5, 5))
        w = self.rng.normal((4, 3, 3, 3))
        for stride, pad in ((1, 1), (2, 0), (2, 1)):
            params = {"stride": stride, "padding": pad}
            with ad.no_grad():
                y = OPS["conv2d"].forward(ad.constant(x), [ad.constant(w)], params).value
            np.testing.assert_allclose(y, conv2d_direct(x, w, stride, pad), atol=1e-12)

    def test_conv_weight_and_input_gradients(self):
        x = self.rng.normal((2, 2, 4, 4))
        w = self.rng.normal((3, 2, 3, 3))
        target = self.rng.normal((2, 3, 4, 4))
        params = {"padding": 1}
        self.assert_grad_matches(
            lambda v: ad.squared_error(OPS["conv2d"].forward(ad.constant(x), [v], params), target), w
        )
        self.assert_grad_matches(
            lambda v: ad.squared_error(OPS["conv2d"].forward(v, [ad.constant(w)], params), target), x
        )

    def test_pools(self):
        x = self.rng.normal((2, 2, 4, 4))
        target = self.rng.normal((2, 2, 2, 2))
        for kind in ("avgpool", "maxpool"):
            self.assert_grad_matches(
                lambda v, kind=kind: ad.squared_error(OPS[kind].forward(v, [], {"kernel": 2}), target), x
            )

    def test_attention_rows_are_distributions(self):
        x = ad.constant(self.rng.normal((2, 3, 4)))
        ws = [ad.constant(self.rng.normal((4, 4))) for _ in range(3)]
        with ad.no_grad():
            p = OPS["attention_qkv"].probabilities(x, ws, {"heads": 2, "head_dim": 2}).value
        self.assertEqual(p.shape, (2, 2, 3, 3))
        np.testing.assert_allclose(p.sum(axis=-1), np.ones((2, 2, 3)), atol=1e-12)

    def test_attention_value_gradient(self):
        x = ad.constant(self.rng.normal((2, 3, 4)))
        wq, wk = (ad.constant(self.rng.normal((4, 4))) for _ in range(2))
        wv = self.rng.normal((4, 4))
        target = self.rng.normal((2, 3, 4))
        params = {"heads": 2, "head_dim": 2}
        self.assert_grad_matches(
            lambda v: ad.squared_error(OPS["attention_qkv"].forward(x, [wq, wk, v], params), target), wv
        )


class TestSecondOrder(unittest.TestCase):
    def test_double_backward_matches_gradient_differences(self):
        rng = T.Rng(2)
        a = ad.constant(rng.normal((6, 3)))
        target = rng.normal((6, 2))
        w0 = rng.normal((3, 2))
        v = rng.normal((3, 2))

        def gradient(w):
            var = ad.variable(w)
            (g,) = ad.grad(ad.squared_error(ad.gelu(ad.matmul(a, var)), target), [var])
            return g.value

        var = ad.variable(w0)
        (g,) = ad.grad(ad.squared_error(ad.gelu(ad.matmul(a, var)), target), [var], create_graph=True)
        (hv,) = ad.grad(ad.vdot(g, ad.constant(v)), [var])
        h = 1e-5
        expected = (gradient(w0 + h * v) - gradient(w0 - h * v)) / (2 * h)
        np.testing.assert_allclose(hv.value, expected, rtol=1e-6, atol=1e-8)


if __name__ == "__main__":
    unittest.main()
