"""Op kinds a network manifest may use.

Each kind knows its weight roles, how to infer its output shape from the input
shape (batch dimension excluded) and how to run forward on ``Var`` values.
``residual_begin`` and ``residual_add`` manipulate the skip stack and are
handled by the graph executor rather than here.
"""

import math
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from snows import autodiff as ad
from snows.errors import DimensionError, StructuralError

Shape = Tuple[int, ...]

RESIDUAL_KINDS = ("residual_begin", "residual_add")


def _param(params: Mapping, key: str, default=None):
    value = params.get(key, default)
    if value is None:
        raise StructuralError(f"missing op parameter {key!r}")
    return value


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise DimensionError(message)


class OpKind:
    """Shape rule and forward rule for one manifest op kind."""

    kind = ""
    weight_roles: Tuple[str, ...] = ()
    optional_roles: Tuple[str, ...] = ()
    prunable_roles: Tuple[str, ...] = ()

    def check_weights(self, names: Sequence[str]) -> None:
        low = len(self.weight_roles)
        high = low + len(self.optional_roles)
        if not low <= len(names) <= high:
            raise StructuralError(
                f"{self.kind} takes {low}..{high} weights, got {len(names)}: {list(names)}"
            )

    def output_shape(self, params: Mapping, in_shape: Shape, weights: List[Shape]) -> Shape:
        raise NotImplementedError

    def forward(self, x: ad.Var, weights: List[ad.Var], params: Mapping) -> ad.Var:
        raise NotImplementedError


def _add_bias(y: ad.Var, bias: ad.Var) -> ad.Var:
    shaped = ad.reshape(bias, (1,) * (y.ndim - 1) + (bias.shape[0],))
    return ad.add(y, ad.expand(shaped, y.shape))


class Dense(OpKind):
    kind = "dense"
    weight_roles = ("weight",)
    optional_roles = ("bias",)
    prunable_roles = ("weight",)

    def output_shape(self, params, in_shape, weights):
        _expect(len(in_shape) in (1, 2), f"{self.kind} expects (d_in,) or (seq, d_in), got {in_shape}")
        w = weights[0]
        _expect(len(w) == 2, f"{self.kind} weight must be (d_in, d_out), got {w}")
        _expect(in_shape[-1] == w[0], f"{self.kind} input {in_shape} does not match weight {w}")
        if len(weights) > 1:
            _expect(weights[1] == (w[1],), f"{self.kind} bias {weights[1]} does not match {w}")
        return in_shape[:-1] + (w[1],)

    def forward(self, x, weights, params):
        w = weights[0]
        if x.ndim == 3:
            n, seq, d_in = x.shape
            y = ad.matmul(ad.reshape(x, (n * seq, d_in)), w)
            if len(weights) > 1:
                y = _add_bias(y, weights[1])
            return ad.reshape(y, (n, seq, w.shape[1]))
        y = ad.matmul(x, w)
        if len(weights) > 1:
            y = _add_bias(y, weights[1])
        return y


class AttentionOut(Dense):
    """Output projection ``Z W_O (+ b)`` of multi-head attention."""

    kind = "attention_out"


class Conv2d(OpKind):
    kind = "conv2d"
    weight_roles = ("weight",)
    optional_roles = ("bias",)
    prunable_roles = ("weight",)

    def output_shape(self, params, in_shape, weights):
        _expect(len(in_shape) == 3, f"conv2d expects (C, H, W), got {in_shape}")
        w = weights[0]
        _expect(len(w) == 4, f"conv2d weight must be (d_out, d_in, k_h, k_w), got {w}")
        _expect(in_shape[0] == w[1], f"conv2d input channels {in_shape[0]} != weight d_in {w[1]}")
        if len(weights) > 1:
            _expect(weights[1] == (w[0],), f"conv2d bias {weights[1]} does not match {w}")
        stride = int(params.get("stride", 1))
        pad = int(params.get("padding", 0))
        out_h = ad.conv_output_size(in_shape[1], w[2], stride, pad)
        out_w = ad.conv_output_size(in_shape[2], w[3], stride, pad)
        _expect(out_h > 0 and out_w > 0, f"conv2d kernel {w[2:]} too large for {in_shape}")
        return (w[0], out_h, out_w)

    def forward(self, x, weights, params):
        w = weights[0]
        d_out, d_in, kh, kw = w.shape
        stride = int(params.get("stride", 1))
        pad = int(params.get("padding", 0))
        n, _, h, wd = x.shape
        out_h = ad.conv_output_size(h, kh, stride, pad)
        out_w = ad.conv_output_size(wd, kw, stride, pad)
        cols = ad.im2col(x, kh, kw, stride, pad)
        w_mat = ad.transpose(ad.reshape(w, (d_out, d_in * kh * kw)), (1, 0))
        y = ad.matmul(cols, w_mat)
        if len(weights) > 1:
            y = _add_bias(y, weights[1])
        y = ad.reshape(y, (n, out_h, out_w, d_out))
        return ad.transpose(y, (0, 3, 1, 2))


class Pointwise(OpKind):
    def output_shape(self, params, in_shape, weights):
        return in_shape


class Relu(Pointwise):
    kind = "relu"

    def forward(self, x, weights, params):
        return ad.relu(x)


class Gelu(Pointwise):
    kind = "gelu"

    def forward(self, x, weights, params):
        return ad.gelu(x)


class Softmax(Pointwise):
    kind = "softmax"

    def forward(self, x, weights, params):
        return ad.softmax(x, axis=-1)


class BatchNormAffine(Pointwise):
    """Inference-mode batch norm: frozen per-channel scale and shift.

    Weights are ``gamma, beta, running_mean, running_var``; they are read as
    constants and never differentiated.
    """

    kind = "batchnorm_affine"
    weight_roles = ("gamma", "beta", "running_mean", "running_var")

    def output_shape(self, params, in_shape, weights):
        _expect(len(in_shape) in (1, 3), f"batchnorm_affine expects (C,) or (C, H, W), got {in_shape}")
        for w in weights:
            _expect(w == (in_shape[0],), f"batchnorm_affine stats {w} do not match {in_shape}")
        return in_shape

    @staticmethod
    def affine(weights: Sequence[np.ndarray], eps: float) -> Tuple[np.ndarray, np.ndarray]:
        gamma, beta, mean, var = weights
        scale = gamma / np.sqrt(var + eps)
        return scale, beta - mean * scale

    def forward(self, x, weights, params):
        eps = float(params.get("eps", 1e-5))
        scale, shift = self.affine([w.value for w in weights], eps)
        shaped = (1, x.shape[1]) + (1,) * (x.ndim - 2)
        scale = np.broadcast_to(scale.reshape(shaped), x.shape).astype(x.dtype)
        shift = np.broadcast_to(shift.reshape(shaped), x.shape).astype(x.dtype)
        return ad.add(ad.mul(x, ad.constant(scale)), ad.constant(shift))


class Pool(OpKind):
    """Non-overlapping pooling; ``global: true`` pools the whole spatial extent."""

    def _window(self, params, in_shape) -> Tuple[int, int]:
        if params.get("global", False):
            return in_shape[1], in_shape[2]
        k = int(_param(params, "kernel"))
        stride = int(params.get("stride", k))
        if stride != k:
            raise StructuralError(f"{self.kind} supports non-overlapping windows only (stride == kernel)")
        return k, k

    def output_shape(self, params, in_shape, weights):
        _expect(len(in_shape) == 3, f"{self.kind} expects (C, H, W), got {in_shape}")
        kh, kw = self._window(params, in_shape)
        _expect(
            in_shape[1] % kh == 0 and in_shape[2] % kw == 0,
            f"{self.kind} window {(kh, kw)} does not tile {in_shape}",
        )
        return (in_shape[0], in_shape[1] // kh, in_shape[2] // kw)

    def windows(self, x: ad.Var, params) -> ad.Var:
        n, c, h, w = x.shape
        kh, kw = self._window(params, x.shape[1:])
        tiled = ad.reshape(x, (n, c, h // kh, kh, w // kw, kw))
        return ad.transpose(tiled, (0, 1, 2, 4, 3, 5))


class AvgPool(Pool):
    kind = "avgpool"

    def forward(self, x, weights, params):
        tiles = self.windows(x, params)
        kh, kw = tiles.shape[-2:]
        return ad.scale(ad.sum(tiles, (4, 5)), 1.0 / (kh * kw))


class MaxPool(Pool):
    kind = "maxpool"

    def forward(self, x, weights, params):
        return ad.window_max(self.windows(x, params), (4, 5))


class Flatten(OpKind):
    kind = "flatten"

    def output_shape(self, params, in_shape, weights):
        return (int(np.prod(in_shape)),)

    def forward(self, x, weights, params):
        return ad.reshape(x, (x.shape[0], -1))


class AttentionQKV(OpKind):
    """Multi-head self-attention up to (not including) the output projection.

    Produces ``softmax(Q K^T / sqrt(d_H)) V`` with heads concatenated along the
    last axis.
    """

    kind = "attention_qkv"
    weight_roles = ("w_q", "w_k", "w_v")
    prunable_roles = ("w_q", "w_k", "w_v")

    def output_shape(self, params, in_shape, weights):
        heads = int(_param(params, "heads"))
        head_dim = int(_param(params, "head_dim"))
        _expect(len(in_shape) == 2, f"attention_qkv expects (seq, d), got {in_shape}")
        for w in weights:
            _expect(
                w == (in_shape[1], heads * head_dim),
                f"attention_qkv weight {w} must be {(in_shape[1], heads * head_dim)}",
            )
        return (in_shape[0], heads * head_dim)

    def _heads(self, x2: ad.Var, w: ad.Var, n: int, seq: int, heads: int, head_dim: int) -> ad.Var:
        projected = ad.reshape(ad.matmul(x2, w), (n, seq, heads, head_dim))
        return ad.transpose(projected, (0, 2, 1, 3))

    def probabilities(self, x: ad.Var, weights: List[ad.Var], params: Mapping) -> ad.Var:
        heads = int(params["heads"])
        head_dim = int(params["head_dim"])
        n, seq, d = x.shape
        x2 = ad.reshape(x, (n * seq, d))
        q = self._heads(x2, weights[0], n, seq, heads, head_dim)
        k = self._heads(x2, weights[1], n, seq, heads, head_dim)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
        return ad.softmax(scores, axis=-1)

    def forward(self, x, weights, params):
        heads = int(params["heads"])
        head_dim = int(params["head_dim"])
        n, seq, d = x.shape
        x2 = ad.reshape(x, (n * seq, d))
        v = self._heads(x2, weights[2], n, seq, heads, head_dim)
        z = ad.matmul(self.probabilities(x, weights, params), v)
        return ad.reshape(ad.transpose(z, (0, 2, 1, 3)), (n, seq, heads * head_dim))


OPS: Dict[str, OpKind] = {
    op.kind: op
    for op in (
        Dense(),
        AttentionOut(),
        Conv2d(),
        Relu(),
        Gelu(),
        Softmax(),
        BatchNormAffine(),
        AvgPool(),
        MaxPool(),
        Flatten(),
        AttentionQKV(),
    )
}

KINDS = tuple(OPS) + RESIDUAL_KINDS


def conv2d_direct(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Reference convolution by explicit summation (no im2col)."""
    n, c, h, wd = x.shape
    d_out, d_in, kh, kw = w.shape
    out_h = ad.conv_output_size(h, kh, stride, pad)
    out_w = ad.conv_output_size(wd, kw, stride, pad)
    img = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)], "constant")
    out = np.zeros((n, d_out, out_h, out_w), dtype=x.dtype)
    for b in range(n):
        for o in range(d_out):
            for i in range(out_h):
                for j in range(out_w):
                    acc = 0.0
                    for ci in range(d_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += img[b, ci, i * stride + u, j * stride + v] * w[o, ci, u, v]
                    out[b, o, i, j] = acc
    return out
