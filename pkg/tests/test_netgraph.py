"""Tests for network graphs, sub-networks and manifests."""

import tempfile
import unittest
from pathlib import Path

import numpy as np

from snows import autodiff as ad
from snows import netgraph, zoo
from snows import tensor as T
from snows.errors import DimensionError, DtypeError, StructuralError, ValidationError


def two_layer_mlp(seed=0):
    doc = zoo.manifest(
        (4,),
        [
            zoo.op("fc0", "dense", weights=("fc0.weight", "fc0.bias")),
            zoo.op("relu0", "relu", target=True),
            zoo.op("fc1", "dense", weights=("fc1.weight",), target=True),
        ],
        {"fc0.weight": (4, 5), "fc0.bias": (5,), "fc1.weight": (5, 3)},
        ["fc0.weight", "fc1.weight"],
    )
    return netgraph.NetworkGraph.from_manifest(doc, zoo.init_weights(doc, T.Rng(seed)))


class TestNetworkGraph(unittest.TestCase):
    def setUp(self):
        self.g = two_layer_mlp()
        self.x = T.Rng(1).normal((6, 4))

    def test_forward_matches_numpy(self):
        w0, b0, w1 = (self.g.weights[n] for n in ("fc0.weight", "fc0.bias", "fc1.weight"))
        expected = np.maximum(self.x @ w0 + b0, 0) @ w1
        np.testing.assert_allclose(netgraph.forward(self.g, self.x), expected, atol=1e-12)

    def test_forward_rejects_wrong_input_shape(self):
        with self.assertRaises(DimensionError):
            netgraph.forward(self.g, np.zeros((2, 5)))

    def test_weights_are_read_only(self):
        with self.assertRaises(ValueError):
            self.g.weights["fc1.weight"][0, 0] = 1.0

    def test_subnetwork_targets_and_clamping(self):
        sub = self.g.subnetwork(0, 5)
        self.assertEqual(sub.target_indices, (1, 2))
        self.assertEqual(sub.horizon, 1)
        self.assertEqual(sub.k_max, 1)
        self.assertEqual(self.g.subnetwork(0, 0).target_indices, (1,))

    def test_negative_horizon(self):
        with self.assertRaises(ValidationError):
            self.g.subnetwork(0, -1)

    def test_forward_capture_orders_targets(self):
        outs = netgraph.forward_capture(self.g.subnetwork(0, 1), self.x)
        self.assertEqual([o.shape for o in outs], [(6, 5), (6, 3)])
        np.testing.assert_allclose(outs[-1], netgraph.forward(self.g, self.x))

    def test_loss_zero_at_dense_weights(self):
        sub = self.g.subnetwork(0, 1)
        targets = netgraph.forward_capture(sub, self.x)
        loss = netgraph.reconstruction_loss(netgraph.capture_vars(sub, self.x), targets)
        self.assertEqual(float(loss.value), 0.0)
        grad = netgraph.grad_wrt_layer(sub, targets, "fc0.weight", self.x)
        np.testing.assert_array_equal(grad, np.zeros((4, 5)))

    def test_grad_wrt_weight_outside_subnetwork(self):
        sub = self.g.subnetwork(2, 0)
        targets = netgraph.forward_capture(sub, self.g.state_at(2, self.x))
        with self.assertRaises(ValidationError):
            netgraph.grad_wrt_layer(sub, targets, "fc0.weight", self.g.state_at(2, self.x))

    def test_grad_wrt_layer_matches_manual_gradient(self):
        sub = self.g.subnetwork(2, 0)
        state = self.g.state_at(2, self.x)
        targets = [np.zeros((6, 3))]
        grad = netgraph.grad_wrt_layer(sub, targets, "fc1.weight", state)
        expected = 2 * state.x.T @ (state.x @ self.g.weights["fc1.weight"])
        np.testing.assert_allclose(grad, expected, atol=1e-10)

    def test_replace_weights_returns_new_graph(self):
        new = self.g.replace_weights({"fc1.weight": np.zeros((5, 3))})
        self.assertFalse(np.any(new.weights["fc1.weight"]))
        self.assertTrue(np.any(self.g.weights["fc1.weight"]))
        with self.assertRaises(DimensionError):
            self.g.replace_weights({"fc1.weight": np.zeros((3, 5))})

    def test_prunable_groups_in_manifest_order(self):
        self.assertEqual(self.g.prunable_groups(), [(0, ("fc0.weight",)), (2, ("fc1.weight",))])

    def test_dtype_mismatch_on_execute(self):
        with self.assertRaises(DtypeError):
            self.g.execute(netgraph.Activation(self.x.astype(np.float32)), 0, 1)


class TestStructure(unittest.TestCase):
    def test_unclosed_residual(self):
        doc = zoo.manifest((3,), [zoo.op("r", "residual_begin"), zoo.op("a", "relu", target=True)], {}, [])
        with self.assertRaises(StructuralError):
            netgraph.NetworkGraph.from_manifest(doc, {})

    def test_prunable_weight_needs_a_target(self):
        doc = zoo.manifest((3,), [zoo.op("fc", "dense", weights=("w",))], {"w": (3, 2)}, ["w"])
        with self.assertRaises(StructuralError):
            netgraph.NetworkGraph.from_manifest(doc, {"w": np.zeros((3, 2))})

    def test_bias_is_not_prunable(self):
        doc = zoo.manifest(
            (3,), [zoo.op("fc", "dense", weights=("w", "b"), target=True)], {"w": (3, 2), "b": (2,)}, ["b"]
        )
        with self.assertRaises(StructuralError):
            netgraph.NetworkGraph.from_manifest(doc, {"w": np.zeros((3, 2)), "b": np.zeros(2)})

    def test_shape_error_names_op(self):
        doc = zoo.manifest((3,), [zoo.op("fc", "dense", weights=("w",), target=True)], {"w": (4, 2)}, [])
        with self.assertRaisesRegex(DimensionError, "op 0"):
            netgraph.NetworkGraph.from_manifest(doc, {"w": np.zeros((4, 2))})

    def test_residual_block_state_carries_skips(self):
        g = zoo.build(zoo.resnet_block(channels=2, size=4, classes=3, dtype="float64"), seed=0)
        x = T.Rng(0).normal((2, 2, 4, 4))
        state = g.state_at(1, x)
        self.assertEqual(len(state.skips), 1)
        np.testing.assert_array_equal(state.skips[0], x)
        self.assertEqual(netgraph.forward(g, x).shape, (2, 3))

    def test_toy_cnn_shapes(self):
        g = zoo.build(zoo.toy_cnn(), seed=0)
        self.assertEqual(g.dtype, np.float32)
        self.assertEqual(g.output_shape, (10,))
        self.assertEqual(netgraph.forward(g, np.zeros((1, 4, 8, 8))).shape, (1, 10))


class TestManifest(unittest.TestCase):
    def test_save_load_and_hash(self):
        g = two_layer_mlp()
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "net.json"
            netgraph.save_manifest(g.to_manifest(), path)
            loaded = netgraph.load_manifest(path)
        self.assertEqual(loaded, g.to_manifest())
        self.assertEqual(netgraph.manifest_hash(loaded), netgraph.manifest_hash(g.to_manifest()))

    def test_hash_changes_with_structure(self):
        doc = two_layer_mlp().to_manifest()
        other = dict(doc, prunable=["fc1.weight"])
        self.assertNotEqual(netgraph.manifest_hash(doc), netgraph.manifest_hash(other))

    def test_rejects_foreign_document(self):
        with self.assertRaises(StructuralError):
            netgraph.validate_manifest({"format": "onnx", "version": 1})

    def test_missing_weight(self):
        doc = two_layer_mlp().to_manifest()
        with self.assertRaises(StructuralError):
            netgraph.NetworkGraph.from_manifest(doc, {})

    def test_overrides_make_outputs_differentiable(self):
        g = two_layer_mlp()
        sub = g.subnetwork(2, 0)
        w = ad.variable(g.weights["fc1.weight"])
        (out,) = netgraph.capture_vars(sub, g.state_at(2, np.ones((2, 4))), {"fc1.weight": w})
        self.assertTrue(out.requires_grad)


if __name__ == "__main__":
    unittest.main()
