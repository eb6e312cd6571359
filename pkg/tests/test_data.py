"""Tests for dataset record files and calibration sampling."""

import tempfile
import unittest
from pathlib import Path

import numpy as np

from snows import data as datasets
from snows import tensor as T
from snows.errors import DatasetError, DimensionError, ValidationError


class TestRecords(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_float32_records(self):
        layout = datasets.layout_for("float32", (2, 3))
        self.assertEqual(layout.record_bytes, 1 + 24)
        x = np.arange(24, dtype=np.float64).reshape(4, 2, 3) / 8
        path = self.dir / "calib.bin"
        datasets.write_records(path, x, [0, 1, 2, 9], layout)
        self.assertEqual(path.stat().st_size, 4 * layout.record_bytes)
        features, labels = datasets.read_records(path, layout)
        self.assertEqual(features.dtype, np.float64)
        np.testing.assert_array_equal(features, x)
        np.testing.assert_array_equal(labels, [0, 1, 2, 9])

    def test_cifar10_records_are_scaled(self):
        layout = datasets.layout_for("cifar10", (3, 32, 32))
        self.assertEqual(layout.record_bytes, 3073)
        pixels = T.Rng(0).integers(0, 256, (2, 3, 32, 32))
        path = self.dir / "cifar.bin"
        datasets.write_records(path, pixels / 255.0, [3, 7], layout)
        features, labels = datasets.read_records(path, layout)
        np.testing.assert_allclose(features, pixels / 255.0, atol=1e-12)
        self.assertLessEqual(features.max(), 1.0)
        np.testing.assert_array_equal(labels, [3, 7])

    def test_partial_record(self):
        layout = datasets.layout_for("float32", (2,))
        path = self.dir / "short.bin"
        path.write_bytes(b"\x00" * (layout.record_bytes + 3))
        with self.assertRaises(DatasetError):
            datasets.read_records(path, layout)

    def test_missing_file(self):
        with self.assertRaises(DatasetError):
            datasets.read_records(self.dir / "absent.bin", datasets.CIFAR10)

    def test_layout_errors(self):
        with self.assertRaises(DimensionError):
            datasets.layout_for("cifar10", (8,))
        with self.assertRaises(ValidationError):
            datasets.layout_for("imagenet", (8,))

    def test_write_rejects_bad_input(self):
        layout = datasets.layout_for("float32", (2,))
        with self.assertRaises(DimensionError):
            datasets.write_records(self.dir / "x.bin", np.zeros((3, 4)), [0, 1, 2], layout)
        with self.assertRaises(ValidationError):
            datasets.write_records(self.dir / "x.bin", np.zeros((1, 2)), [256], layout)


class TestSampling(unittest.TestCase):
    def test_synthetic_is_seeded(self):
        a, la = datasets.synthetic_gaussian(T.Rng(4), 30, (5,), classes=3)
        b, lb = datasets.synthetic_gaussian(T.Rng(4), 30, (5,), classes=3)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(la, lb)
        self.assertEqual(a.shape, (30, 5))
        self.assertEqual(np.bincount(la).tolist(), [10, 10, 10])
        c, _ = datasets.synthetic_gaussian(T.Rng(5), 30, (5,), classes=3)
        self.assertFalse(np.array_equal(a, c))

    def test_synthetic_validation(self):
        with self.assertRaises(ValidationError):
            datasets.synthetic_gaussian(T.Rng(0), 4, (2,), classes=0)

    def test_calibration_sample(self):
        x = np.arange(20, dtype=np.float64).reshape(10, 2)
        labels = np.arange(10)
        picked, picked_labels = datasets.calibration_sample(x, 4, T.Rng(1), labels)
        self.assertEqual(picked.shape, (4, 2))
        np.testing.assert_array_equal(picked[:, 0] / 2, picked_labels)
        self.assertTrue(np.all(np.diff(picked_labels) > 0))
        again = datasets.calibration_sample(x, 4, T.Rng(1))
        np.testing.assert_array_equal(again, picked)
        np.testing.assert_array_equal(datasets.calibration_sample(x, None, T.Rng(1)), x)
        np.testing.assert_array_equal(datasets.calibration_sample(x, 50, T.Rng(1)), x)
        with self.assertRaises(ValidationError):
            datasets.calibration_sample(x, 0, T.Rng(1))


if __name__ == "__main__":
    unittest.main()
