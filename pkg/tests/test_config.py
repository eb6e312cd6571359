"""Tests for run configuration resolution."""

import json
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from snows import config
from snows.errors import ConfigError
from snows.version import __version__


class TestRunConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = config.RunConfig("oracle")
        self.assertEqual(cfg.mask, "nm:2:4")
        self.assertEqual(cfg.out, "snows-out")
        self.assertEqual(cfg.ks, (0, 1, 3, 5))
        prune = config.RunConfig("prune", model="mlp").prune_config()
        self.assertEqual(prune.horizon, 0)
        self.assertEqual(prune.newton.cg.lam, 1e-4)
        self.assertEqual(prune.newton.cg.tol, 1e-3)
        self.assertEqual(prune.newton.cg.max_iters, 100)
        self.assertIsNone(prune.newton.early_stop_rel)

    def test_dict_round_trip(self):
        cfg = config.RunConfig("ablate", model="mlp", study="sgd-vs-newton", lrs=[0.1, 0.2])
        self.assertEqual(cfg.lrs, (0.1, 0.2))
        data = cfg.to_dict()
        self.assertEqual(data["lrs"], [0.1, 0.2])
        self.assertEqual(config.RunConfig.from_dict(data), cfg)

    def test_invalid_values(self):
        cases = [
            {"command": "train"},
            {"command": "oracle", "suite": "everything"},
            {"command": "prune", "model": "vgg"},
            {"command": "prune", "model": "mlp", "mask": "nm:3"},
            {"command": "prune", "model": "mlp", "overrides": {"fc0.weight": "dense"}},
            {"command": "prune", "model": "mlp", "layout": "imagenet"},
            {"command": "prune", "model": "mlp", "threads": 0},
            {"command": "prune", "model": "mlp", "dtype": "float16"},
            {"command": "prune"},
            {"command": "eval", "manifest": "net.json"},
            {"command": "ablate", "model": "mlp"},
            {"command": "oracle", "colour": "blue"},
        ]
        for values in cases:
            with self.assertRaises(ConfigError, msg=str(values)):
                config.RunConfig.from_dict(values)

    def test_effective_threads(self):
        self.assertEqual(config.RunConfig("oracle", threads=3).effective_threads, 3)
        with patch("os.cpu_count", return_value=None):
            self.assertEqual(config.RunConfig("oracle").effective_threads, 1)


class TestResolve(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_precedence(self):
        path = self.dir / "cfg.json"
        path.write_text(json.dumps({"command": "eval", "model": "mlp", "seed": 1, "lam": 0.5}))
        cfg = config.resolve("prune", {"seed": 9}, str(path))
        self.assertEqual(cfg.command, "prune")
        self.assertEqual((cfg.seed, cfg.lam, cfg.model), (9, 0.5, "mlp"))

    def test_bad_files(self):
        (self.dir / "broken.json").write_text("{not json")
        (self.dir / "list.json").write_text("[1, 2]")
        for name in ("broken.json", "list.json", "absent.json"):
            with self.assertRaises(ConfigError, msg=name):
                config.load_config_file(self.dir / name)

    def test_run_record(self):
        cfg = config.RunConfig("prune", model="mlp", seed=11)
        path = config.write_run_record(cfg, self.dir / "out")
        record = json.loads(path.read_text())
        self.assertEqual(record["seed"], 11)
        self.assertEqual(record["version"], f"v{__version__}")
        self.assertEqual(record["config"]["model"], "mlp")
        self.assertEqual(config.version_string(), f"v{__version__}")


if __name__ == "__main__":
    unittest.main()
