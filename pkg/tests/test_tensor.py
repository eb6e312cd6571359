"""Tests for tensor arithmetic and seeded streams."""

import math
import unittest

import numpy as np

from snows import tensor as T
from snows.errors import DimensionError, DtypeError, ValidationError


class TestTensorOps(unittest.TestCase):
    def test_resolve_dtype_rejects_half(self):
        self.assertEqual(T.resolve_dtype("float32"), np.float32)
        with self.assertRaises(DtypeError):
            T.resolve_dtype("float16")

    def test_as_tensor_defaults_integers_to_double(self):
        t = T.as_tensor([1, 2, 3])
        self.assertEqual(t.dtype, np.float64)
        self.assertTrue(t.flags["C_CONTIGUOUS"])

    def test_matmul_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            T.matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_matmul_rejects_mixed_dtypes(self):
        with self.assertRaises(DtypeError):
            T.matmul(np.zeros((2, 2), np.float32), np.zeros((2, 2), np.float64))

    def test_elementwise_no_implicit_broadcast(self):
        with self.assertRaises(DimensionError):
            T.elementwise("add", np.zeros((2, 3)), np.zeros((3,)))

    def test_scale_accepts_scalar_either_side(self):
        x = np.arange(4, dtype=np.float32)
        np.testing.assert_array_equal(T.elementwise("scale", 2.0, x), x * 2)
        np.testing.assert_array_equal(T.elementwise("scale", x, 2.0), x * 2)
        self.assertEqual(T.elementwise("scale", x, 2.0).dtype, np.float32)

    def test_unknown_elementwise_op(self):
        with self.assertRaises(ValidationError):
            T.elementwise("pow", np.ones(2), np.ones(2))

    def test_reduce_axis_out_of_range(self):
        with self.assertRaises(DimensionError):
            T.reduce("sum", np.zeros((2, 3)), 2)

    def test_max_over_empty_axis(self):
        with self.assertRaises(DimensionError):
            T.reduce("max", np.zeros((0, 3)), 0)

    def test_sum_matches_compensated_reference(self):
        x = T.Rng(3).normal((1000,))
        self.assertAlmostEqual(float(T.reduce("sum", x)), math.fsum(x.tolist()), places=10)

    def test_reshape_size_mismatch(self):
        with self.assertRaises(DimensionError):
            T.reshape(np.zeros(6), (4, 2))

    def test_expand_is_explicit(self):
        out = T.expand(np.array([1.0, 2.0]), (3, 2))
        self.assertEqual(out.shape, (3, 2))
        with self.assertRaises(DimensionError):
            T.expand(np.zeros(3), (2, 2))


class TestGelu(unittest.TestCase):
    def test_gelu_known_values(self):
        self.assertEqual(float(T.gelu(np.array(0.0))), 0.0)
        self.assertAlmostEqual(float(T.gelu(np.array(1.0))), 0.8413447460685429, places=12)

    def test_derivatives_match_finite_differences(self):
        x = np.linspace(-3, 3, 13)
        h = 1e-6
        fd1 = (T.gelu(x + h) - T.gelu(x - h)) / (2 * h)
        fd2 = (T.gelu_grad(x + h) - T.gelu_grad(x - h)) / (2 * h)
        np.testing.assert_allclose(T.gelu_grad(x), fd1, atol=1e-8)
        np.testing.assert_allclose(T.gelu_hess(x), fd2, atol=1e-8)


class TestRng(unittest.TestCase):
    def test_same_seed_same_values(self):
        a = T.Rng(7).stream("shuffle").standard_normal(5)
        b = T.Rng(7).stream("shuffle").standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_named_streams_are_independent(self):
        rng = T.Rng(7)
        before = rng.stream("calibration").standard_normal(4)
        rng.stream("init:fc0.weight").standard_normal(100)
        after = rng.stream("calibration").standard_normal(4)
        np.testing.assert_array_equal(before, after)
        self.assertFalse(np.array_equal(before, rng.stream("shuffle").standard_normal(4)))

    def test_different_seeds_differ(self):
        self.assertFalse(
            np.array_equal(T.Rng(1).stream("x").standard_normal(3), T.Rng(2).stream("x").standard_normal(3))
        )

    def test_normal_honours_dtype(self):
        self.assertEqual(T.Rng(0).normal((2, 2), np.float32).dtype, np.float32)


if __name__ == "__main__":
    unittest.main()
