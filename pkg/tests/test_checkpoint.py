"""Tests for the binary checkpoint container."""

import json
import os
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np

from snows import checkpoint
from snows import masks as M
from snows.errors import CheckpointError


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.weights = {
            "fc.weight": np.arange(8, dtype=np.float32).reshape(4, 2),
            "fc.bias": np.array([0.5, -0.5], dtype=np.float32),
        }

    def tearDown(self):
        self.tmp.cleanup()

    def test_layout_preamble(self):
        payload = checkpoint.encode(checkpoint.from_weights(self.weights))
        magic, version, header_len = struct.unpack_from("<4sIQ", payload)
        self.assertEqual(magic, b"SNWS")
        self.assertEqual(version, 1)
        self.assertEqual(len(payload), 16 + header_len + 8 * 4 + 2 * 4)

    def test_save_and_load_preserves_values_and_masks(self):
        z = M.magnitude_mask_nm(self.weights["fc.weight"], 2, 4)
        ckpt = checkpoint.from_weights(self.weights, {"fc.weight": z}, "abc", {"completed": ["fc"]})
        path = self.dir / "net.snws"
        checkpoint.save_checkpoint(path, ckpt)
        loaded = checkpoint.load_checkpoint(path, dtype="float32", manifest_hash="abc")
        for name, value in self.weights.items():
            np.testing.assert_array_equal(loaded.weights()[name], value)
            self.assertEqual(loaded.weights()[name].dtype, np.float32)
        np.testing.assert_array_equal(loaded.masks()["fc.weight"], z.pattern.astype(np.float32))
        self.assertEqual(loaded.mask_kinds["fc.weight"], {"type": "n_of_m", "n": 2, "m": 4})
        self.assertEqual(loaded.metadata, {"completed": ["fc"]})

    def test_encoding_is_deterministic(self):
        ckpt = checkpoint.from_weights(self.weights)
        self.assertEqual(checkpoint.encode(ckpt), checkpoint.encode(checkpoint.from_weights(self.weights)))

    def test_cross_dtype_load_names_both(self):
        payload = checkpoint.encode(checkpoint.from_weights(self.weights))
        with self.assertRaisesRegex(CheckpointError, "float32.*float64"):
            checkpoint.decode(payload, dtype="float64")

    def test_bad_magic(self):
        payload = b"XXXX" + checkpoint.encode(checkpoint.from_weights(self.weights))[4:]
        with self.assertRaisesRegex(CheckpointError, "magic"):
            checkpoint.decode(payload)

    def test_bad_version(self):
        payload = bytearray(checkpoint.encode(checkpoint.from_weights(self.weights)))
        payload[4:8] = struct.pack("<I", 2)
        with self.assertRaisesRegex(CheckpointError, "version"):
            checkpoint.decode(bytes(payload))

    def test_truncated_blob(self):
        payload = checkpoint.encode(checkpoint.from_weights(self.weights))
        with self.assertRaisesRegex(CheckpointError, "truncated"):
            checkpoint.decode(payload[:-3])

    def test_malformed_directory(self):
        def payload(header):
            raw = json.dumps(header).encode("utf-8")
            return struct.pack("<4sIQ", checkpoint.MAGIC, checkpoint.VERSION, len(raw)) + raw + b"\0" * 8

        entry = {"name": "w", "shape": [2], "dtype": "float32", "offset": 0, "nbytes": 8}
        headers = [
            {"manifest_hash": None},
            [entry],
            {"tensors": [dict(entry, dtype="float99")]},
            {"tensors": [dict(entry, dtype="int32")]},
            {"tensors": [{k: v for k, v in entry.items() if k != "shape"}]},
        ]
        for header in headers:
            with self.assertRaises(CheckpointError, msg=str(header)):
                checkpoint.decode(payload(header))
        self.assertEqual(checkpoint.decode(payload({"tensors": [entry]})).tensors["w"].shape, (2,))

    def test_manifest_hash_mismatch(self):
        payload = checkpoint.encode(checkpoint.from_weights(self.weights, manifest_hash="abc"))
        with self.assertRaisesRegex(CheckpointError, "manifest hash"):
            checkpoint.decode(payload, manifest_hash="def")

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            checkpoint.load_checkpoint(self.dir / "absent.snws")

    def test_atomic_write_leaves_no_temp_files(self):
        path = self.dir / "net.snws"
        checkpoint.save_checkpoint(path, checkpoint.from_weights(self.weights))
        checkpoint.save_checkpoint(path, checkpoint.from_weights(self.weights))
        self.assertEqual(os.listdir(self.dir), ["net.snws"])


if __name__ == "__main__":
    unittest.main()
