"""Small reference networks and a tiny classifier trainer.

The builders return manifests; ``init_weights`` fills a weight store with He
initialization and ``fit_classifier`` trains a graph with momentum SGD on
softmax cross-entropy so pruning has trained weights to work on.
"""

import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from snows import autodiff as ad
from snows import netgraph
from snows import tensor as T
from snows.errors import ValidationError
from snows.ops import OPS

logger = logging.getLogger(__name__)


def op(name: str, kind: str, params: Optional[Dict[str, Any]] = None, weights: Sequence[str] = (), target: bool = False):
    return {"name": name, "kind": kind, "params": dict(params or {}), "weights": list(weights), "target": target}


def manifest(
    input_shape: Sequence[int],
    ops: List[Dict[str, Any]],
    weight_shapes: Dict[str, Sequence[int]],
    prunable: Sequence[str],
    dtype: str = "float64",
) -> Dict[str, Any]:
    return {
        "format": netgraph.MANIFEST_FORMAT,
        "version": netgraph.MANIFEST_VERSION,
        "input_shape": list(input_shape),
        "dtype": dtype,
        "ops": ops,
        "weight_shapes": {n: list(s) for n, s in sorted(weight_shapes.items())},
        "prunable": list(prunable),
    }


def mlp(d_in: int = 16, hidden: Sequence[int] = (32, 32), classes: int = 10, dtype: str = "float32"):
    ops, shapes, prunable = [], {}, []
    widths = [d_in] + list(hidden)
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        ops.append(op(f"fc{i}", "dense", weights=(f"fc{i}.weight", f"fc{i}.bias")))
        ops.append(op(f"relu{i}", "relu", target=True))
        shapes[f"fc{i}.weight"] = (a, b)
        shapes[f"fc{i}.bias"] = (b,)
        prunable.append(f"fc{i}.weight")
    last = len(hidden)
    ops.append(op(f"fc{last}", "dense", weights=(f"fc{last}.weight", f"fc{last}.bias"), target=True))
    shapes[f"fc{last}.weight"] = (widths[-1], classes)
    shapes[f"fc{last}.bias"] = (classes,)
    prunable.append(f"fc{last}.weight")
    return manifest((d_in,), ops, shapes, prunable, dtype)


def toy_cnn(channels: int = 4, size: int = 8, widths: Tuple[int, int] = (4, 8), classes: int = 10, dtype: str = "float32"):
    """conv-relu-maxpool, conv-relu, global average pool, dense."""
    c0, c1 = widths
    ops = [
        op("conv0", "conv2d", {"stride": 1, "padding": 1}, ("conv0.weight", "conv0.bias")),
        op("relu0", "relu", target=True),
        op("pool0", "maxpool", {"kernel": 2}),
        op("conv1", "conv2d", {"stride": 1, "padding": 1}, ("conv1.weight", "conv1.bias")),
        op("relu1", "relu", target=True),
        op("gap", "avgpool", {"global": True}),
        op("flatten", "flatten"),
        op("fc", "dense", weights=("fc.weight", "fc.bias"), target=True),
    ]
    shapes = {
        "conv0.weight": (c0, channels, 3, 3),
        "conv0.bias": (c0,),
        "conv1.weight": (c1, c0, 3, 3),
        "conv1.bias": (c1,),
        "fc.weight": (c1, classes),
        "fc.bias": (classes,),
    }
    return manifest((channels, size, size), ops, shapes, ["conv0.weight", "conv1.weight", "fc.weight"], dtype)


def resnet_block(channels: int = 8, size: int = 8, classes: int = 10, dtype: str = "float32"):
    """One basic residual block (conv-bn-relu-conv-bn + skip, relu) and a linear head."""
    bn = ("gamma", "beta", "running_mean", "running_var")
    ops = [
        op("block.in", "residual_begin"),
        op("conv_a", "conv2d", {"padding": 1}, ("conv_a.weight",)),
        op("bn_a", "batchnorm_affine", {"eps": 1e-5}, tuple(f"bn_a.{r}" for r in bn)),
        op("relu_a", "relu", target=True),
        op("conv_b", "conv2d", {"padding": 1}, ("conv_b.weight",)),
        op("bn_b", "batchnorm_affine", {"eps": 1e-5}, tuple(f"bn_b.{r}" for r in bn)),
        op("block.add", "residual_add"),
        op("relu_out", "relu", target=True),
        op("gap", "avgpool", {"global": True}),
        op("flatten", "flatten"),
        op("fc", "dense", weights=("fc.weight", "fc.bias"), target=True),
    ]
    shapes = {
        "conv_a.weight": (channels, channels, 3, 3),
        "conv_b.weight": (channels, channels, 3, 3),
        "fc.weight": (channels, classes),
        "fc.bias": (classes,),
    }
    for layer in ("bn_a", "bn_b"):
        for role in bn:
            shapes[f"{layer}.{role}"] = (channels,)
    return manifest(
        (channels, size, size), ops, shapes, ["conv_a.weight", "conv_b.weight", "fc.weight"], dtype
    )


def _roles(doc: Dict[str, Any]) -> Dict[str, Tuple[str, str]]:
    roles = {}
    for spec in doc["ops"]:
        kind = spec["kind"]
        if kind not in OPS:
            continue
        names = OPS[kind].weight_roles + OPS[kind].optional_roles
        for name, role in zip(spec.get("weights", ()), names):
            roles[name] = (kind, role)
    return roles


def init_weights(doc: Dict[str, Any], rng: T.Rng) -> Dict[str, T.Tensor]:
    """He-normal weights, zero biases and identity batch-norm statistics.

    Each tensor draws from its own ``init:<name>`` stream.
    """
    dtype = doc.get("dtype", "float64")
    weights = {}
    for name, (kind, role) in sorted(_roles(doc).items()):
        shape = tuple(doc["weight_shapes"][name])
        if role in ("bias", "beta", "running_mean"):
            value = np.zeros(shape)
        elif role in ("gamma", "running_var"):
            value = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if kind == "conv2d" else shape[0]
            std = np.sqrt(2.0 / fan_in) if kind != "attention_qkv" else np.sqrt(1.0 / fan_in)
            value = rng.stream(f"init:{name}").standard_normal(shape) * std
        weights[name] = T.as_tensor(value, dtype)
    return weights


def build(doc: Dict[str, Any], seed: int = 0) -> netgraph.NetworkGraph:
    return netgraph.NetworkGraph.from_manifest(doc, init_weights(doc, T.Rng(seed)))


def cross_entropy(logits: ad.Var, labels: np.ndarray) -> ad.Var:
    """Mean softmax cross-entropy over the batch."""
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(logits.shape[0]), labels] = 1
    picked = ad.sum(ad.mul(ad.log_softmax(logits, axis=-1), ad.constant(onehot)))
    return ad.scale(picked, -1.0 / logits.shape[0])


def fit_classifier(
    g: netgraph.NetworkGraph,
    x: T.Tensor,
    labels: Sequence[int],
    steps: int = 200,
    lr: float = 0.05,
    momentum: float = 0.9,
    batch_size: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[netgraph.NetworkGraph, List[float]]:
    """Train the dense/conv weights of ``g``; batch-norm statistics stay frozen."""
    if steps < 0 or lr <= 0:
        raise ValidationError(f"need steps >= 0 and lr > 0, got steps={steps}, lr={lr}")
    x = T.as_tensor(x, g.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    trainable = sorted(n for n, (kind, _) in _roles(g.to_manifest()).items() if kind != "batchnorm_affine")
    params = {n: g.weights[n].copy() for n in trainable}
    velocity = {n: np.zeros_like(v) for n, v in params.items()}
    rng = rng if rng is not None else np.random.Generator(np.random.Philox(0))
    history = []
    for step in range(steps):
        if batch_size is None or batch_size >= x.shape[0]:
            index = np.arange(x.shape[0])
        else:
            index = np.sort(rng.choice(x.shape[0], size=batch_size, replace=False))
        variables = {n: ad.variable(v) for n, v in params.items()}
        logits, _, _ = g.execute(netgraph.Activation(x[index]), 0, len(g.ops), variables)
        loss = cross_entropy(ad.reshape(logits, (len(index), -1)), labels[index])
        grads = ad.grad(loss, [variables[n] for n in trainable])
        for name, grad in zip(trainable, grads):
            velocity[name] = momentum * velocity[name] - lr * grad.value
            params[name] = (params[name] + velocity[name]).astype(g.dtype)
        history.append(float(loss.value))
        if step % 50 == 0:
            logger.debug("fit step %d: loss %.6f", step, history[-1])
    return g.replace_weights(params), history
