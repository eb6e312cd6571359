"""Run configuration for the command line.

A run is described by one flat ``RunConfig``. Values come from three places,
later ones winning: dataclass defaults, a JSON file given with ``--config``,
and flags given explicitly on the command line.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from snows import newton, pipeline, solver
from snows.errors import ConfigError
from snows.version import __version__

logger = logging.getLogger(__name__)

COMMANDS = ("prune", "eval", "ablate", "oracle")
STUDIES = ("k-sweep", "cg-iters", "sgd-vs-newton", "fisher-vs-newton")
SUITES = ("hvp", "cg", "k0", "toy-quadratic", "all")
MODELS = ("mlp", "toy-cnn", "resnet-block")
LAYOUTS = ("float32", "cifar10")
DTYPES = ("float32", "float64")

_TUPLES = ("ks", "cg_budgets", "lrs")


@dataclass(frozen=True)
class RunConfig:
    command: str
    manifest: Optional[str] = None
    checkpoint: Optional[str] = None
    reference: Optional[str] = None
    resume: Optional[str] = None
    model: Optional[str] = None
    dtype: Optional[str] = None
    data: Optional[str] = None
    layout: str = "float32"
    out: str = "snows-out"
    seed: int = 0
    threads: Optional[int] = None
    chunk_size: Optional[int] = None
    # pruning
    horizon: int = 0
    mask: str = "nm:2:4"
    overrides: Dict[str, str] = field(default_factory=dict)
    calib_n: Optional[int] = None
    batch_size: Optional[int] = None
    batches: Optional[int] = None
    epochs: int = 1
    early_stop: Optional[float] = None
    lam: float = 1e-4
    cg_tol: float = 1e-3
    cg_max_iters: int = 100
    cg_relative: bool = False
    eps_fd: float = 0.0
    # ablations
    study: Optional[str] = None
    layer: int = 0
    ks: Tuple[int, ...] = (0, 1, 3, 5)
    cg_budgets: Tuple[int, ...] = (5, 50, 500)
    lrs: Tuple[float, ...] = (1e-3, 1e-2, 1e-1)
    sgd_steps: int = 2000
    newton_steps: int = 10
    # oracles
    suite: str = "all"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; expected one of {list(COMMANDS)}")
        if self.study is not None and self.study not in STUDIES:
            raise ConfigError(f"unknown study {self.study!r}; expected one of {list(STUDIES)}")
        if self.suite not in SUITES:
            raise ConfigError(f"unknown oracle suite {self.suite!r}; expected one of {list(SUITES)}")
        if self.model is not None and self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {list(MODELS)}")
        if self.layout not in LAYOUTS:
            raise ConfigError(f"unknown layout {self.layout!r}; expected one of {list(LAYOUTS)}")
        if self.dtype is not None and self.dtype not in DTYPES:
            raise ConfigError(f"unknown dtype {self.dtype!r}; expected one of {list(DTYPES)}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")
        if self.command == "ablate" and self.study is None:
            raise ConfigError("ablate needs --study")
        if self.command in ("prune", "eval", "ablate"):
            if self.manifest is None and self.model is None:
                raise ConfigError(f"{self.command} needs --manifest (with --checkpoint) or --model")
            if self.manifest is not None and self.checkpoint is None:
                raise ConfigError("--manifest needs a matching --checkpoint")
        for name in _TUPLES:
            object.__setattr__(self, name, tuple(getattr(self, name)))
        pipeline.MaskSpec.parse(self.mask)
        for spec in self.overrides.values():
            pipeline.MaskSpec.parse(spec)

    @property
    def effective_threads(self) -> int:
        return self.threads or os.cpu_count() or 1

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for name in _TUPLES:
            data[name] = list(data[name])
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys {unknown}")
        return cls(**dict(data))

    def cg_config(self) -> solver.CgConfig:
        return solver.CgConfig(
            tol=self.cg_tol,
            max_iters=self.cg_max_iters,
            lam=self.lam,
            eps_fd=self.eps_fd,
            relative_tol=self.cg_relative,
        )

    def newton_config(self) -> newton.NewtonConfig:
        return newton.NewtonConfig(
            batch_size=self.batch_size,
            batches=self.batches,
            cg=self.cg_config(),
            max_epochs=self.epochs,
            early_stop_rel=self.early_stop,
        )

    def prune_config(self, failure_checkpoint: Optional[str] = None) -> pipeline.PruneConfig:
        return pipeline.PruneConfig(
            horizon=self.horizon,
            mask=pipeline.MaskSpec.parse(self.mask),
            overrides={n: pipeline.MaskSpec.parse(s) for n, s in self.overrides.items()},
            newton=self.newton_config(),
            calib_n=self.calib_n,
            seed=self.seed,
            failure_checkpoint=failure_checkpoint,
            chunk_size=self.chunk_size,
            threads=self.effective_threads,
        )


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def resolve(command: str, flags: Mapping[str, Any], config_path: Optional[str] = None) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values: Dict[str, Any] = {}
    if config_path is not None:
        values.update(load_config_file(config_path))
        values.pop("command", None)
    values.update(flags)
    values["command"] = command
    cfg = RunConfig.from_dict(values)
    logger.debug("resolved %s config: %s", command, cfg)
    return cfg


def version_string() -> str:
    return f"v{__version__}"


def write_run_record(cfg: RunConfig, out_dir: Union[str, Path]) -> Path:
    """``run.json`` holding the resolved config, version and seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run.json"
    record = {"config": cfg.to_dict(), "seed": cfg.seed, "version": version_string()}
    path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path
