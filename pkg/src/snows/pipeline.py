"""Whole-network pruning.

Prunable ops are handled front to back. For each one the activation state is
advanced through the already-pruned prefix, dense targets are captured with the
still-dense downstream weights, the layer's masked weights are optimized, and the
result is committed before moving on. A failing layer leaves a checkpoint of the
committed prefix that ``prune_network(..., resume=...)`` continues from.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from snows import checkpoint
from snows import data as datasets
from snows import masks as M
from snows import netgraph, newton, recon
from snows import tensor as T
from snows.errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    NumericalError,
    PruningAborted,
    SnowsError,
)
from snows.newton import NewtonConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskSpec:
    """``unstructured:<s>``, ``nm:<N>:<M>`` or ``import:<path>``."""

    kind: str
    sparsity: float = 0.0
    n: int = 0
    m: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind == "unstructured":
            if not 0.0 <= self.sparsity <= 1.0:
                raise ConfigError(f"sparsity must lie in [0, 1], got {self.sparsity}")
        elif self.kind == "nm":
            if not 1 <= self.n <= self.m:
                raise ConfigError(f"N:M needs 1 <= N <= M, got {self.n}:{self.m}")
        elif self.kind == "import":
            if not self.path:
                raise ConfigError("import mask spec needs a path")
        else:
            raise ConfigError(f"unknown mask kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "MaskSpec":
        kind, _, rest = text.partition(":")
        try:
            if kind == "unstructured":
                return cls(kind, sparsity=float(rest))
            if kind == "nm":
                n, m = rest.split(":")
                return cls(kind, n=int(n), m=int(m))
            if kind == "import":
                return cls(kind, path=rest)
        except ValueError as exc:
            raise ConfigError(f"malformed mask spec {text!r}: {exc}") from exc
        raise ConfigError(f"unknown mask spec {text!r}; expected unstructured:s, nm:N:M or import:path")

    def __str__(self) -> str:
        if self.kind == "unstructured":
            return f"unstructured:{self.sparsity!r}"
        if self.kind == "nm":
            return f"nm:{self.n}:{self.m}"
        return f"import:{self.path}"

    def build(self, name: str, w: T.Tensor) -> M.Mask:
        if self.kind == "unstructured":
            return M.magnitude_mask_unstructured(w, self.sparsity)
        if self.kind == "nm":
            return M.magnitude_mask_nm(w, self.n, self.m)
        return M.import_mask(self.path, name, like=w)


@dataclass(frozen=True)
class PruneConfig:
    horizon: int = 0
    mask: MaskSpec = field(default_factory=lambda: MaskSpec("nm", n=2, m=4))
    overrides: Mapping[str, MaskSpec] = field(default_factory=dict)
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    calib_n: Optional[int] = None
    seed: int = 0
    verify_cascade: bool = True
    failure_checkpoint: Optional[str] = None
    chunk_size: Optional[int] = None
    threads: int = 1

    def __post_init__(self):
        if self.horizon < 0:
            raise ConfigError(f"horizon K must be non-negative, got {self.horizon}")
        if self.calib_n is not None and self.calib_n < 1:
            raise ConfigError(f"calib_n must be positive, got {self.calib_n}")
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")

    def mask_for(self, w_name: str) -> MaskSpec:
        return self.overrides.get(w_name, self.mask)


@dataclass
class LayerReport:
    name: str
    op_index: int
    weights: Tuple[str, ...]
    horizon: int
    k_max: int
    loss_initial: Optional[float]
    loss_final: Optional[float]
    nnz: int
    numel: int
    accepted_steps: int
    status: str = "pruned"

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.numel if self.numel else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "op_index": self.op_index,
            "weights": list(self.weights),
            "horizon": self.horizon,
            "k_max": self.k_max,
            "loss_initial": self.loss_initial,
            "loss_final": self.loss_final,
            "nnz": self.nnz,
            "numel": self.numel,
            "sparsity": self.sparsity,
            "accepted_steps": self.accepted_steps,
            "status": self.status,
        }


@dataclass
class PruningReport:
    layers: List[LayerReport] = field(default_factory=list)
    masks: Dict[str, M.Mask] = field(default_factory=dict)
    trajectories: Dict[str, List[newton.TrajectoryRecord]] = field(default_factory=dict)
    seed: int = 0

    @property
    def nnz(self) -> int:
        return sum(z.nnz for z in self.masks.values())

    @property
    def numel(self) -> int:
        return sum(z.numel for z in self.masks.values())

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.numel if self.numel else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "layers": [layer.to_dict() for layer in self.layers],
            "masks": {
                name: {"kind": z.kind.to_dict(), "nnz": z.nnz, "numel": z.numel, "sparsity": z.sparsity}
                for name, z in sorted(self.masks.items())
            },
            "global": {"nnz": self.nnz, "numel": self.numel, "sparsity": self.sparsity},
        }

    def write(self, out_dir: Union[str, Path]) -> Path:
        """``report.json`` plus one trajectory CSV per layer under ``trajectories/``."""
        out = Path(out_dir)
        (out / "trajectories").mkdir(parents=True, exist_ok=True)
        path = out / "report.json"
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        for name, records in self.trajectories.items():
            newton.write_trajectory(records, out / "trajectories" / f"{_file_safe(name)}.csv")
        return path


def _file_safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def capture_targets(
    g: netgraph.NetworkGraph, op_index: int, horizon: int, state
) -> List[T.Tensor]:
    """Dense outputs at the K+1 targets downstream of op ``op_index``."""
    return netgraph.forward_capture(g.subnetwork(op_index, horizon), state)


def save_pruned(
    path: Union[str, Path],
    g: netgraph.NetworkGraph,
    masks: Optional[Mapping[str, M.Mask]] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> None:
    ckpt = checkpoint.from_weights(
        g.weights, masks, netgraph.manifest_hash(g.to_manifest()), metadata
    )
    checkpoint.save_checkpoint(path, ckpt)


def load_graph(
    manifest_path: Union[str, Path], checkpoint_path: Union[str, Path]
) -> Tuple[netgraph.NetworkGraph, checkpoint.Checkpoint]:
    """Graph from a manifest plus the weights of a checkpoint written for it.

    The checkpoint must hold tensors of the manifest dtype, and its manifest hash
    (when present) must match the graph rebuilt from the manifest.
    """
    manifest = netgraph.load_manifest(manifest_path)
    ckpt = checkpoint.load_checkpoint(checkpoint_path, dtype=manifest.get("dtype"))
    g = netgraph.NetworkGraph.from_manifest(manifest, ckpt.weights())
    expected = netgraph.manifest_hash(g.to_manifest())
    if ckpt.manifest_hash is not None and ckpt.manifest_hash != expected:
        raise CheckpointError(
            f"{checkpoint_path}: manifest hash {ckpt.manifest_hash} does not match {manifest_path} ({expected})"
        )
    return g, ckpt


def restore_masks(ckpt: checkpoint.Checkpoint) -> Dict[str, M.Mask]:
    """Masks stored in a checkpoint, with their recorded kinds."""
    restored = {}
    for name, values in ckpt.masks().items():
        kind = ckpt.mask_kinds.get(name)
        pattern = values == 1
        restored[name] = M.Mask(
            pattern,
            M.kind_from_dict(kind) if kind else M.Unstructured(float(np.mean(~pattern))),
        )
    return restored


def _check_cascade(g: netgraph.NetworkGraph, x0: T.Tensor, op_index: int, state: netgraph.Activation):
    fresh = g.state_at(op_index, x0)
    if not np.array_equal(fresh.x, state.x) or not all(
        np.array_equal(a, b) for a, b in zip(fresh.skips, state.skips)
    ):
        raise NumericalError(f"cascaded input to op {op_index} differs from a fresh forward pass")


def prune_network(
    g: netgraph.NetworkGraph,
    cfg: PruneConfig,
    data: T.Tensor,
    resume: Optional[checkpoint.Checkpoint] = None,
) -> Tuple[netgraph.NetworkGraph, PruningReport]:
    """Prune every prunable op of ``g`` in manifest order.

    ``data`` holds calibration inputs; when ``cfg.calib_n`` is set the first
    ``calib_n`` samples after a seeded shuffle are used.
    """
    rng = T.Rng(cfg.seed)
    x0 = T.as_tensor(data, g.dtype)
    if tuple(x0.shape[1:]) != g.input_shape:
        raise DimensionError(f"calibration data shape {tuple(x0.shape[1:])} vs network input {g.input_shape}")
    if cfg.calib_n is not None:
        x0 = datasets.calibration_sample(x0, cfg.calib_n, rng)
    unknown = sorted(set(cfg.overrides) - set(g.prunable))
    if unknown:
        raise ConfigError(f"mask overrides for non-prunable weights {unknown}")

    current = g
    completed: List[str] = []
    resumed_masks: Dict[str, M.Mask] = {}
    if resume is not None:
        completed = list(resume.metadata.get("completed", []))
        current = g.replace_weights({n: w for n, w in resume.weights().items() if n in g.weights})
        resumed_masks = restore_masks(resume)
        logger.info("resuming after %d completed layer(s)", len(completed))

    report = PruningReport(seed=cfg.seed)
    state = netgraph.Activation(x0)
    position = 0
    for op_index, names in g.prunable_groups():
        label = g.ops[op_index].name or "+".join(names)
        state = current.advance(state, position, op_index)
        position = op_index
        if cfg.verify_cascade:
            _check_cascade(current, x0, op_index, state)

        if label in completed:
            layer_masks = [resumed_masks[n] for n in names]
            report.masks.update(zip(names, layer_masks))
            k_max = len(current.target_indices_from(op_index)) - 1
            report.layers.append(
                LayerReport(
                    label, op_index, names, min(cfg.horizon, k_max), k_max, None, None,
                    sum(z.nnz for z in layer_masks), sum(z.numel for z in layer_masks), 0, "resumed",
                )
            )
            continue

        logger.info("pruning layer %s (op %d)", label, op_index)
        try:
            layer_masks = [cfg.mask_for(n).build(n, current.weights[n]) for n in names]
            task = recon.build_task(
                current, names, state, cfg.horizon, layer_masks, cfg.chunk_size, cfg.threads
            )
            result = newton.optimize_layer(task, cfg.newton, rng.stream(f"shuffle:{label}"), label)
        except SnowsError as exc:
            path = cfg.failure_checkpoint
            if path is not None:
                save_pruned(path, current, report.masks, {"completed": completed})
            raise PruningAborted(label, path, exc) from exc

        current = current.replace_weights(task.unpack(result.weights))
        for name, z in zip(names, layer_masks):
            report.masks[name] = z
        report.trajectories[label] = result.trajectory
        report.layers.append(
            LayerReport(
                label,
                op_index,
                names,
                task.horizon,
                task.sub.k_max,
                result.loss_initial,
                result.loss_final,
                sum(z.nnz for z in layer_masks),
                sum(z.numel for z in layer_masks),
                result.accepted_steps,
            )
        )
        completed.append(label)
        logger.info(
            "committed %s: K=%d, loss %.6e -> %.6e", label, task.horizon, result.loss_initial, result.loss_final
        )
        del task
    logger.info("pruned %d layer(s), global sparsity %.4f", len(report.layers), report.sparsity)
    return current, report


@dataclass
class EvalReport:
    accuracy: Optional[float]
    reference_accuracy: Optional[float]
    layer_losses: Dict[str, float]

    @property
    def accuracy_delta(self) -> Optional[float]:
        if self.accuracy is None or self.reference_accuracy is None:
            return None
        return self.accuracy - self.reference_accuracy

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "reference_accuracy": self.reference_accuracy,
            "accuracy_delta": self.accuracy_delta,
            "layer_losses": dict(self.layer_losses),
        }


def accuracy(g: netgraph.NetworkGraph, x: T.Tensor, labels: Sequence[int]) -> float:
    logits = netgraph.forward(g, x)
    predicted = np.argmax(logits.reshape(logits.shape[0], -1), axis=1)
    return float(np.mean(predicted == np.asarray(labels)))


def layer_losses(
    pruned: netgraph.NetworkGraph, dense: netgraph.NetworkGraph, x: T.Tensor, horizon: int = 0
) -> Dict[str, float]:
    """K-step loss of each pruned layer on the pruned network's own cascaded inputs.

    Targets come from the dense reference weights at the same inputs, so a
    network compared with itself scores zero everywhere.
    """
    x0 = T.as_tensor(x, dense.dtype)
    losses: Dict[str, float] = {}
    state = netgraph.Activation(x0)
    position = 0
    for op_index, names in dense.prunable_groups():
        state = pruned.advance(state, position, op_index)
        position = op_index
        label = dense.ops[op_index].name or "+".join(names)
        task = recon.build_task(dense, names, state, horizon)
        losses[label] = recon.loss(task, task.pack(pruned.weights))
    return losses


def evaluate_network(
    pruned: netgraph.NetworkGraph,
    dense: netgraph.NetworkGraph,
    x: T.Tensor,
    labels: Optional[Sequence[int]] = None,
    horizon: int = 0,
) -> EvalReport:
    if pruned.to_manifest() != dense.to_manifest():
        raise ConfigError("pruned and reference networks have different manifests")
    acc = ref = None
    if labels is not None:
        acc = accuracy(pruned, x, labels)
        ref = accuracy(dense, x, labels)
    return EvalReport(acc, ref, layer_losses(pruned, dense, x, horizon))
