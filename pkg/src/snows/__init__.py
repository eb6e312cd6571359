"""SNOWS: one-shot pruning with K-step reconstruction and Hessian-free Newton."""

from snows.errors import SnowsError
from snows.masks import Mask, NOfM, Unstructured
from snows.netgraph import NetworkGraph
from snows.newton import NewtonConfig, optimize_layer
from snows.pipeline import MaskSpec, PruneConfig, evaluate_network, prune_network
from snows.recon import ReconstructionTask, build_task
from snows.solver import CgConfig, cg_solve, hvp
from snows.version import __version__

__all__ = [
    "CgConfig",
    "Mask",
    "MaskSpec",
    "NOfM",
    "NetworkGraph",
    "NewtonConfig",
    "PruneConfig",
    "ReconstructionTask",
    "SnowsError",
    "Unstructured",
    "__version__",
    "build_task",
    "cg_solve",
    "evaluate_network",
    "hvp",
    "optimize_layer",
    "prune_network",
]
