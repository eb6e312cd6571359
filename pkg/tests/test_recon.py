"""Tests for the K-step reconstruction objective."""

import unittest

import numpy as np

from snows import masks as M
from snows import netgraph, recon, vit, zoo
from snows import tensor as T
from snows.errors import DimensionError, DtypeError, MaskError, StructuralError, ValidationError


def gelu_mlp(seed=0):
    doc = zoo.manifest(
        (4,),
        [
            zoo.op("fc0", "dense", weights=("fc0.weight", "fc0.bias")),
            zoo.op("act0", "gelu", target=True),
            zoo.op("fc1", "dense", weights=("fc1.weight",), target=True),
        ],
        {"fc0.weight": (4, 6), "fc0.bias": (6,), "fc1.weight": (6, 3)},
        ["fc0.weight", "fc1.weight"],
    )
    return netgraph.NetworkGraph.from_manifest(doc, zoo.init_weights(doc, T.Rng(seed)))


class TestLoss(unittest.TestCase):
    def setUp(self):
        self.g = gelu_mlp()
        self.x = T.Rng(1).normal((10, 4))
        self.mask = M.magnitude_mask_nm(self.g.weights["fc0.weight"], 2, 4)
        self.task = recon.build_task(self.g, ["fc0.weight"], self.x, 1, [self.mask])

    def test_dense_weights_have_zero_loss(self):
        task = recon.build_task(self.g, ["fc0.weight"], self.x, 1)
        self.assertEqual(recon.loss(task, task.dense_weights()), 0.0)

    def test_loss_is_raw_sum_over_targets(self):
        w = self.task.initial_weights()
        pruned = self.g.replace_weights({"fc0.weight": w})
        dense_out = netgraph.forward_capture(self.g.subnetwork(0, 1), self.x)
        pruned_out = netgraph.forward_capture(pruned.subnetwork(0, 1), self.x)
        expected = sum(float(np.sum((a - b) ** 2)) for a, b in zip(dense_out, pruned_out))
        self.assertAlmostEqual(recon.loss(self.task, w), expected, places=10)

    def test_horizon_clamps_to_available_targets(self):
        task = recon.build_task(self.g, ["fc0.weight"], self.x, 9, [self.mask])
        self.assertEqual(task.horizon, 1)
        self.assertEqual(len(task.targets), 2)

    def test_gradient_matches_finite_differences(self):
        w = self.task.initial_weights()
        g = recon.grad_active(self.task, w)
        h = 1e-6
        for j in range(0, self.task.m, 3):
            e = np.zeros(self.task.numel)
            e[self.task.active[j]] = h
            step = e.reshape(w.shape)
            fd = (recon.loss(self.task, w + step) - recon.loss(self.task, w - step)) / (2 * h)
            self.assertAlmostEqual(g[j], fd, delta=1e-5 * max(1.0, abs(fd)))

    def test_active_set_is_ascending_flat_index(self):
        self.assertEqual(self.task.m, 12)
        np.testing.assert_array_equal(self.task.active, np.flatnonzero(self.mask.pattern.ravel()))

    def test_rejects_mask_inconsistent_weights(self):
        with self.assertRaises(MaskError):
            recon.loss(self.task, self.task.dense_weights())

    def test_rejects_wrong_shape_and_dtype(self):
        with self.assertRaises(DimensionError):
            recon.loss(self.task, np.zeros((6, 4)))
        with self.assertRaises(DtypeError):
            recon.loss(self.task, self.task.initial_weights().astype(np.float32))

    def test_weights_of_different_ops(self):
        with self.assertRaises(StructuralError):
            recon.build_task(self.g, ["fc0.weight", "fc1.weight"], self.x, 0)


class TestChunking(unittest.TestCase):
    def test_threads_and_chunks_do_not_change_results(self):
        g = gelu_mlp()
        x = T.Rng(4).normal((13, 4))
        mask = M.magnitude_mask_unstructured(g.weights["fc0.weight"], 0.5)
        base = recon.build_task(g, ["fc0.weight"], x, 1, [mask], chunk_size=4, threads=1)
        threaded = recon.build_task(g, ["fc0.weight"], x, 1, [mask], chunk_size=4, threads=3)
        w = base.initial_weights()
        self.assertEqual(recon.loss(base, w), recon.loss(threaded, w))
        np.testing.assert_array_equal(recon.grad_full(base, w), recon.grad_full(threaded, w))
        whole = recon.build_task(g, ["fc0.weight"], x, 1, [mask])
        self.assertAlmostEqual(recon.loss(whole, w), recon.loss(base, w), places=10)

    def test_bad_chunk_size(self):
        g = gelu_mlp()
        with self.assertRaises(ValidationError):
            recon.build_task(g, ["fc0.weight"], np.zeros((2, 4)), 0, chunk_size=0)


class TestBatches(unittest.TestCase):
    def setUp(self):
        g = gelu_mlp()
        self.task = recon.build_task(g, ["fc0.weight"], T.Rng(2).normal((10, 4)), 1)

    def test_batches_partition_the_samples(self):
        order = self.task.shuffled_order(np.random.Generator(np.random.Philox(3)))
        self.assertEqual(recon.batch_count(self.task, 4), 3)
        seen = []
        for b in range(3):
            view = recon.batch_view(self.task, b, 4, order)
            seen.extend(view.inputs.x[:, 0].tolist())
        self.assertEqual(sorted(seen), sorted(self.task.inputs.x[:, 0].tolist()))
        self.assertEqual(recon.batch_view(self.task, 2, 4, order).n, 2)

    def test_batch_losses_sum_to_full_loss(self):
        w = self.task.initial_weights() * 0.5
        total = sum(recon.loss(recon.batch_view(self.task, b, 3), w) for b in range(4))
        self.assertAlmostEqual(total, recon.loss(self.task, w), places=10)

    def test_batch_index_out_of_range(self):
        with self.assertRaises(ValidationError):
            recon.batch_view(self.task, 3, 4)

    def test_per_sample_losses_and_grads(self):
        w = self.task.initial_weights() * 0.9
        losses = recon.per_sample_losses(self.task, w)
        self.assertAlmostEqual(float(losses.sum()), recon.loss(self.task, w), places=10)
        grads = recon.per_sample_grads(self.task, w)
        self.assertEqual(grads.shape, (10, self.task.m))
        np.testing.assert_allclose(grads.sum(axis=0), recon.grad_active(self.task, w), atol=1e-10)

    def test_with_horizon_recaptures_targets(self):
        k0 = recon.with_horizon(self.task, 0)
        self.assertEqual(len(k0.targets), 1)
        np.testing.assert_array_equal(k0.targets[0], self.task.targets[0])


class TestJointTask(unittest.TestCase):
    def test_qkv_packs_in_op_order(self):
        block = vit.build_attention_block(vit.AttentionBlockSpec(d=4, heads=2, head_dim=2, seq=3, mlp_hidden=4), n=2)
        task = vit.qkv_joint_task(block)
        self.assertEqual(task.packed_shape, (48,))
        packed = task.dense_weights()
        np.testing.assert_array_equal(packed[:16], block.graph.weights["w_q"].ravel())
        np.testing.assert_array_equal(packed[32:], block.graph.weights["w_v"].ravel())
        unpacked = task.unpack(packed)
        for name in vit.QKV:
            np.testing.assert_array_equal(unpacked[name], block.graph.weights[name])
        self.assertAlmostEqual(recon.loss(task, packed), 0.0, places=12)


if __name__ == "__main__":
    unittest.main()
