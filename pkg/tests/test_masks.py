"""Tests for magnitude masks, N:M patterns and mask files."""

import tempfile
import unittest
from pathlib import Path

import numpy as np

from snows import checkpoint
from snows import masks as M
from snows import tensor as T
from snows.errors import CheckpointError, DimensionError, MaskError, StructuralError, ValidationError


class TestUnstructured(unittest.TestCase):
    def test_prunes_smallest_magnitudes(self):
        w = np.array([[0.5, -3.0], [0.1, 2.0]])
        z = M.magnitude_mask_unstructured(w, 0.5)
        np.testing.assert_array_equal(z.pattern, [[False, True], [False, True]])
        self.assertEqual(z.nnz, 2)
        self.assertEqual(z.sparsity, 0.5)

    def test_ties_prune_lower_flat_index_first(self):
        z = M.magnitude_mask_unstructured(np.ones(4), 0.5)
        np.testing.assert_array_equal(z.pattern, [False, False, True, True])

    def test_count_rounds_half_up(self):
        z = M.magnitude_mask_unstructured(np.arange(1.0, 8.0), 0.5)
        self.assertEqual(z.numel - z.nnz, 4)
        z.validate()

    def test_extremes(self):
        w = T.Rng(0).normal((3, 4))
        self.assertEqual(M.magnitude_mask_unstructured(w, 0.0).nnz, 12)
        self.assertEqual(M.magnitude_mask_unstructured(w, 1.0).nnz, 0)

    def test_rejects_bad_sparsity(self):
        with self.assertRaises(ValidationError):
            M.magnitude_mask_unstructured(np.ones(3), 1.5)


class TestNOfM(unittest.TestCase):
    def test_dense_groups_run_along_d_in(self):
        w = np.array([[1.0, 4.0], [2.0, 3.0], [3.0, 2.0], [4.0, 1.0]])
        z = M.magnitude_mask_nm(w, 2, 4)
        np.testing.assert_array_equal(z.pattern[:, 0], [False, False, True, True])
        np.testing.assert_array_equal(z.pattern[:, 1], [True, True, False, False])
        z.validate()

    def test_conv_groups_run_along_axis_one(self):
        w = T.Rng(1).normal((3, 8, 3, 3))
        z = M.magnitude_mask_nm(w, 2, 4)
        counts = z.pattern.reshape(3, 2, 4, 3, 3).sum(axis=2)
        self.assertTrue(np.all(counts == 2))
        self.assertEqual(z.sparsity, 0.5)

    def test_ties_keep_lower_index(self):
        z = M.magnitude_mask_nm(np.ones((4, 1)), 2, 4)
        np.testing.assert_array_equal(z.pattern[:, 0], [True, True, False, False])

    def test_indivisible_d_in(self):
        with self.assertRaises(StructuralError):
            M.magnitude_mask_nm(np.ones((6, 2)), 2, 4)

    def test_rank_three_weight(self):
        with self.assertRaises(DimensionError):
            M.magnitude_mask_nm(np.ones((4, 2, 2)), 2, 4)

    def test_validate_names_the_bad_group(self):
        pattern = np.ones((8, 1), dtype=bool)
        pattern[:2, 0] = False
        pattern[4:6, 0] = False
        pattern[4, 0] = True
        with self.assertRaisesRegex(MaskError, "group 1"):
            M.Mask(pattern, M.NOfM(2, 4)).validate()

    def test_n_out_of_range(self):
        with self.assertRaises(ValidationError):
            M.NOfM(5, 4)


class TestApply(unittest.TestCase):
    def test_masked_entries_are_positive_zero(self):
        w = np.array([-1.0, -2.0, 3.0], dtype=np.float32)
        z = M.Mask(np.array([False, True, False]), M.Unstructured(2 / 3))
        out = M.apply(w, z)
        self.assertEqual(out.dtype, np.float32)
        self.assertFalse(np.signbit(out[0]))
        np.testing.assert_array_equal(out, [0.0, -2.0, 0.0])
        self.assertTrue(M.is_consistent(out, z))
        self.assertFalse(M.is_consistent(w, z))

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            M.apply(np.ones(3), M.ones_mask((4,)))

    def test_pattern_is_immutable_copy(self):
        source = np.ones(3, dtype=bool)
        z = M.Mask(source, M.Unstructured(0.0))
        source[0] = False
        self.assertTrue(z.pattern[0])
        with self.assertRaises(ValueError):
            z.pattern[0] = False

    def test_joint_pattern_concatenates_in_order(self):
        a = M.Mask(np.array([[True, False]]), M.Unstructured(0.5))
        b = M.Mask(np.array([False, True, True]), M.Unstructured(1 / 3))
        np.testing.assert_array_equal(M.joint_pattern([a, b]), [True, False, False, True, True])
        np.testing.assert_array_equal(a.active_indices(), [0])


class TestMaskFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "masks.snws"
        self.w = T.Rng(2).normal((8, 3))

    def tearDown(self):
        self.tmp.cleanup()

    def test_export_import(self):
        z = M.magnitude_mask_nm(self.w, 2, 4)
        M.export_mask(z, self.path, "fc.weight")
        back = M.import_mask(self.path, like=self.w, kind=M.NOfM(2, 4))
        np.testing.assert_array_equal(back.pattern, z.pattern)
        self.assertEqual(back.kind, M.NOfM(2, 4))

    def test_import_shape_mismatch_names_tensor(self):
        M.export_mask(M.magnitude_mask_nm(self.w, 2, 4), self.path, "fc.weight")
        with self.assertRaisesRegex(MaskError, "fc.weight"):
            M.import_mask(self.path, "fc.weight", like=np.ones((4, 3)))

    def test_import_kind_mismatch(self):
        M.export_mask(M.magnitude_mask_nm(self.w, 2, 4), self.path, "fc.weight")
        with self.assertRaises(MaskError):
            M.import_mask(self.path, "fc.weight", kind=M.NOfM(1, 4))

    def test_import_unknown_name(self):
        M.export_mask(M.ones_mask((2,)), self.path, "a")
        with self.assertRaises(CheckpointError):
            M.import_mask(self.path, "b")

    def test_import_rejects_non_binary_values(self):
        ckpt = checkpoint.Checkpoint(tensors={"mask:w": np.array([0.0, 0.5, 1.0])})
        checkpoint.save_checkpoint(self.path, ckpt)
        with self.assertRaises(MaskError):
            M.import_masks(self.path)

    def test_import_rejects_broken_nm_pattern(self):
        pattern = np.ones((4, 1))
        ckpt = checkpoint.Checkpoint(
            tensors={"mask:w": pattern}, mask_kinds={"w": M.NOfM(2, 4).to_dict()}
        )
        checkpoint.save_checkpoint(self.path, ckpt)
        with self.assertRaisesRegex(MaskError, "group 0"):
            M.import_masks(self.path)


if __name__ == "__main__":
    unittest.main()
