"""Toy transformer block: joint QKV, output projection and MLP tasks.

The block is an ordinary manifest::

    residual_begin -> attention_qkv* -> attention_out* -> residual_add*
    residual_begin -> dense mlp0* -> gelu* -> dense mlp3* -> residual_add*

(``*`` marks target ops). Q, K and V are pruned together: their task packs
``w_q``, ``w_k`` and ``w_v`` row-major, in that order, into one vector.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from snows import autodiff as ad
from snows import masks as M
from snows import netgraph, recon, zoo
from snows import tensor as T
from snows.errors import ConfigError, ValidationError
from snows.ops import OPS

logger = logging.getLogger(__name__)

QKV = ("w_q", "w_k", "w_v")
QKV_OP = 1
OUT_OP = 2
MLP_OPS = {"mlp0": 5, "mlp3": 7}


@dataclass(frozen=True)
class AttentionBlockSpec:
    d: int = 8
    heads: int = 2
    head_dim: int = 4
    seq: int = 4
    mlp_hidden: int = 16

    def __post_init__(self):
        if min(self.d, self.heads, self.head_dim, self.seq, self.mlp_hidden) < 1:
            raise ConfigError(f"attention block dimensions must be positive: {self}")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    @property
    def scale(self) -> float:
        return 1.0 / float(np.sqrt(self.head_dim))


@dataclass(frozen=True)
class AttentionBlock:
    spec: AttentionBlockSpec
    graph: netgraph.NetworkGraph
    inputs: T.Tensor


def block_manifest(spec: AttentionBlockSpec, dtype: str = "float64") -> Dict:
    op = zoo.op
    ops = [
        op("attn.in", "residual_begin"),
        op("attn", "attention_qkv", {"heads": spec.heads, "head_dim": spec.head_dim}, QKV, True),
        op("attn.out", "attention_out", weights=("w_o",), target=True),
        op("attn.add", "residual_add", target=True),
        op("mlp.in", "residual_begin"),
        op("mlp0", "dense", weights=("mlp0.weight", "mlp0.bias"), target=True),
        op("gelu", "gelu", target=True),
        op("mlp3", "dense", weights=("mlp3.weight", "mlp3.bias"), target=True),
        op("mlp.add", "residual_add", target=True),
    ]
    shapes = {name: (spec.d, spec.width) for name in QKV}
    shapes.update(
        {
            "w_o": (spec.width, spec.d),
            "mlp0.weight": (spec.d, spec.mlp_hidden),
            "mlp0.bias": (spec.mlp_hidden,),
            "mlp3.weight": (spec.mlp_hidden, spec.d),
            "mlp3.bias": (spec.d,),
        }
    )
    prunable = list(QKV) + ["w_o", "mlp0.weight", "mlp3.weight"]
    return zoo.manifest((spec.seq, spec.d), ops, shapes, prunable, dtype)


def build_attention_block(
    spec: AttentionBlockSpec, n: int = 8, seed: int = 0, dtype: str = "float64"
) -> AttentionBlock:
    """A block with seeded weights and ``n`` seeded input sequences."""
    rng = T.Rng(seed)
    graph = netgraph.NetworkGraph.from_manifest(
        block_manifest(spec, dtype), zoo.init_weights(block_manifest(spec, dtype), rng)
    )
    x = T.as_tensor(rng.stream("data").standard_normal((n, spec.seq, spec.d)), dtype)
    return AttentionBlock(spec, graph, x)


def _task(block: AttentionBlock, op_index: int, names: Sequence[str], horizon: int, masks) -> recon.ReconstructionTask:
    state = block.graph.state_at(op_index, block.inputs)
    return recon.build_task(block.graph, names, state, horizon, masks)


def qkv_joint_task(
    block: AttentionBlock, horizon: int = 0, masks: Optional[Sequence[M.Mask]] = None
) -> recon.ReconstructionTask:
    """One task over ``(w_q, w_k, w_v)``; at K = 0 the target is ``softmax(QK^T/sqrt(d_H)) V``."""
    return _task(block, QKV_OP, QKV, horizon, masks)


def out_proj_task(
    block: AttentionBlock, horizon: int = 0, masks: Optional[Sequence[M.Mask]] = None
) -> recon.ReconstructionTask:
    return _task(block, OUT_OP, ("w_o",), horizon, masks)


def mlp_task(
    block: AttentionBlock, layer: str, horizon: int = 1, masks: Optional[Sequence[M.Mask]] = None
) -> recon.ReconstructionTask:
    """Task for ``mlp0`` or ``mlp3``; biases ride along unpruned."""
    if layer not in MLP_OPS:
        raise ValidationError(f"unknown MLP layer {layer!r}; expected one of {sorted(MLP_OPS)}")
    return _task(block, MLP_OPS[layer], (f"{layer}.weight",), horizon, masks)


def attention_probabilities(
    block: AttentionBlock, weights: Optional[Dict[str, T.Tensor]] = None
) -> T.Tensor:
    """Attention matrices ``(n, heads, seq, seq)`` for the block inputs."""
    g = block.graph
    weights = weights or {}
    state = g.state_at(QKV_OP, block.inputs)
    spec = g.ops[QKV_OP]
    values = [ad.constant(T.as_tensor(weights.get(n, g.weights[n]), g.dtype)) for n in QKV]
    with ad.no_grad():
        return OPS["attention_qkv"].probabilities(ad.constant(state.x), values, spec.params).value


def permute_heads(block: AttentionBlock, w: T.Tensor, perm: Sequence[int]) -> T.Tensor:
    """Reorder the head blocks along the last axis of a ``(d, H*d_H)`` weight."""
    spec = block.spec
    blocks = np.asarray(w).reshape(w.shape[0], spec.heads, spec.head_dim)
    return np.ascontiguousarray(blocks[:, list(perm), :].reshape(w.shape))
