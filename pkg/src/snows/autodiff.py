"""Minimal reverse-mode differentiation over numpy values.

A ``Var`` wraps a tensor and, when it depends on a differentiable input,
remembers its parents and a backward rule. Backward rules are written with the
same primitives as forward code, so ``grad(..., create_graph=True)`` records the
backward pass as a graph of its own and can be differentiated again. That is
how exact Hessian-vector products are formed: differentiate ``<grad L, v>``.

Every primitive here is exact to second order. GeLU's second-derivative rule
treats its third derivative as zero, which is fine for Hessian-vector products
but not for third-order quantities.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from snows import tensor as T
from snows.errors import DimensionError

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def recording(enabled: bool) -> Iterator[None]:
    previous = is_recording()
    _state.recording = enabled
    try:
        yield
    finally:
        _state.recording = previous


def no_grad():
    return recording(False)


BackwardFn = Callable[["Var"], Sequence[Optional["Var"]]]


class Var:
    """A tensor value in the computation graph."""

    __slots__ = ("value", "requires_grad", "parents", "backward")

    def __init__(self, value: T.Tensor, requires_grad: bool = False):
        self.value = value
        self.requires_grad = requires_grad
        self.parents: Tuple["Var", ...] = ()
        self.backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)

    def __neg__(self) -> "Var":
        return neg(self)

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def constant(value) -> Var:
    return value if isinstance(value, Var) else Var(np.asarray(value), False)


def variable(value: T.Tensor) -> Var:
    return Var(np.array(value, copy=True), True)


def _node(value: T.Tensor, parents: Tuple[Var, ...], backward: BackwardFn) -> Var:
    if is_recording() and any(p.requires_grad for p in parents):
        out = Var(value, True)
        out.parents = parents
        out.backward = backward
        return out
    return Var(value, False)


# -- primitives ---------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    value = T.elementwise("add", a.value, b.value)
    return _node(value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    value = T.elementwise("sub", a.value, b.value)
    return _node(value, (a, b), lambda g: (g, neg(g)))


def mul(a: Var, b: Var) -> Var:
    value = T.elementwise("mul", a.value, b.value)
    return _node(value, (a, b), lambda g: (mul(g, b), mul(g, a)))


def neg(a: Var) -> Var:
    return _node(-a.value, (a,), lambda g: (neg(g),))


def scale(a: Var, factor: float) -> Var:
    value = T.elementwise("scale", factor, a.value)
    return _node(value, (a,), lambda g: (scale(g, factor),))


def _swap_last(a: Var) -> Var:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def matmul(a: Var, b: Var) -> Var:
    value = T.matmul(a.value, b.value)
    return _node(
        value, (a, b), lambda g: (matmul(g, _swap_last(b)), matmul(_swap_last(a), g))
    )


def transpose(a: Var, axes: Sequence[int]) -> Var:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    value = np.ascontiguousarray(np.transpose(a.value, axes))
    return _node(value, (a,), lambda g: (transpose(g, inverse),))


def reshape(a: Var, shape: Sequence[int]) -> Var:
    original = a.shape
    value = T.reshape(a.value, shape)
    return _node(value, (a,), lambda g: (reshape(g, original),))


def _keepdims_shape(shape: Tuple[int, ...], axes: Optional[Tuple[int, ...]]) -> Tuple[int, ...]:
    if axes is None:
        return tuple(1 for _ in shape)
    norm = {ax % len(shape) for ax in axes}
    return tuple(1 if i in norm else s for i, s in enumerate(shape))


def sum(a: Var, axes: Optional[Sequence[int]] = None, keepdims: bool = False) -> Var:  # noqa: A001
    axes_t = None if axes is None else tuple(axes)
    value = T.reduce("sum", a.value, axes_t)
    kshape = _keepdims_shape(a.shape, axes_t)
    if keepdims:
        value = value.reshape(kshape)
    original = a.shape
    return _node(value, (a,), lambda g: (expand(reshape(g, kshape), original),))


def expand(a: Var, shape: Sequence[int]) -> Var:
    shape = tuple(shape)
    if a.ndim != len(shape):
        raise DimensionError(f"expand keeps rank: {a.shape} -> {shape}")
    original = a.shape
    value = T.expand(a.value, shape)
    return _node(value, (a,), lambda g: (sum_to(g, original),))


def sum_to(a: Var, shape: Sequence[int]) -> Var:
    """Sum the size-1-broadcast axes of ``a`` back down to ``shape``."""
    shape = tuple(shape)
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if t == 1 and s != 1)
    value = np.sum(a.value, axis=axes, keepdims=True) if axes else a.value
    original = a.shape
    return _node(value, (a,), lambda g: (expand(g, original),))


def relu(a: Var) -> Var:
    gate = (a.value > 0).astype(a.dtype)
    return _node(T.relu(a.value), (a,), lambda g: (mul(g, constant(gate)),))


def gelu(a: Var) -> Var:
    return _node(T.gelu(a.value), (a,), lambda g: (mul(g, gelu_grad(a)),))


def gelu_grad(a: Var) -> Var:
    return _node(
        T.gelu_grad(a.value), (a,), lambda g: (mul(g, constant(T.gelu_hess(a.value))),)
    )


def exp(a: Var) -> Var:
    out: Var = _node(np.exp(a.value), (a,), lambda g: (mul(g, out),))
    return out


def reciprocal(a: Var) -> Var:
    out: Var = _node(1.0 / a.value, (a,), lambda g: (neg(mul(g, mul(out, out))),))
    return out


def log(a: Var) -> Var:
    return _node(np.log(a.value), (a,), lambda g: (mul(g, reciprocal(a)),))


def stop_gradient(a: Var) -> Var:
    return constant(a.value)


def take_range(a: Var, start: int, stop: int) -> Var:
    """Slice ``[start, stop)`` of a rank-1 variable."""
    size = a.shape[0]
    value = np.ascontiguousarray(a.value[start:stop])
    return _node(value, (a,), lambda g: (embed_range(g, start, size),))


def embed_range(a: Var, start: int, size: int) -> Var:
    """Place rank-1 ``a`` at ``start`` inside zeros of length ``size``."""
    stop = start + a.shape[0]
    value = np.zeros(size, dtype=a.dtype)
    value[start:stop] = a.value
    return _node(value, (a,), lambda g: (take_range(g, start, stop),))


def window_max(a: Var, axes: Sequence[int]) -> Var:
    """Max over ``axes``; ties route the gradient to the first maximum."""
    axes = tuple(ax % a.ndim for ax in axes)
    kept = [i for i in range(a.ndim) if i not in axes]
    moved = np.transpose(a.value, kept + list(axes))
    flat = moved.reshape(moved.shape[: len(kept)] + (-1,))
    winner = np.argmax(flat, axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, winner[..., None], 1.0, axis=-1)
    onehot = onehot.reshape(moved.shape)
    inverse = np.argsort(kept + list(axes))
    gate = np.ascontiguousarray(np.transpose(onehot, inverse))
    value = T.reduce("max", a.value, axes)
    kshape = _keepdims_shape(a.shape, axes)
    original = a.shape
    return _node(
        value,
        (a,),
        lambda g: (mul(expand(reshape(g, kshape), original), constant(gate)),),
    )


def im2col(x: Var, kh: int, kw: int, stride: int, pad: int) -> Var:
    shape = x.shape
    value = _im2col(x.value, kh, kw, stride, pad)
    return _node(value, (x,), lambda g: (col2im(g, shape, kh, kw, stride, pad),))


def col2im(cols: Var, shape: Tuple[int, ...], kh: int, kw: int, stride: int, pad: int) -> Var:
    value = _col2im(cols.value, shape, kh, kw, stride, pad)
    return _node(value, (cols,), lambda g: (im2col(g, kh, kw, stride, pad),))


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: T.Tensor, kh: int, kw: int, stride: int, pad: int) -> T.Tensor:
    n, c, h, w = x.shape
    out_h = conv_output_size(h, kh, stride, pad)
    out_w = conv_output_size(w, kw, stride, pad)
    img = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)], "constant")
    col = np.zeros((n, c, kh, kw, out_h, out_w), dtype=x.dtype)
    for y in range(kh):
        y_max = y + stride * out_h
        for xx in range(kw):
            x_max = xx + stride * out_w
            col[:, :, y, xx, :, :] = img[:, :, y:y_max:stride, xx:x_max:stride]
    # rows ordered (n, out_h, out_w), columns (c, kh, kw)
    return np.ascontiguousarray(col.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, -1))


def _col2im(
    cols: T.Tensor, shape: Tuple[int, ...], kh: int, kw: int, stride: int, pad: int
) -> T.Tensor:
    n, c, h, w = shape
    out_h = conv_output_size(h, kh, stride, pad)
    out_w = conv_output_size(w, kw, stride, pad)
    col = cols.reshape(n, out_h, out_w, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad + stride - 1, w + 2 * pad + stride - 1), dtype=cols.dtype)
    for y in range(kh):
        y_max = y + stride * out_h
        for xx in range(kw):
            x_max = xx + stride * out_w
            img[:, :, y:y_max:stride, xx:x_max:stride] += col[:, :, y, xx, :, :]
    return np.ascontiguousarray(img[:, :, pad : pad + h, pad : pad + w])


# -- composites ---------------------------------------------------------------


def softmax(a: Var, axis: int = -1) -> Var:
    """Softmax along ``axis`` with max subtraction (gradient-exact)."""
    axis = axis % a.ndim
    shift = constant(np.max(a.value, axis=axis, keepdims=True))
    shifted = sub(a, expand(shift, a.shape))
    e = exp(shifted)
    total = sum(e, (axis,), keepdims=True)
    return mul(e, expand(reciprocal(total), a.shape))


def log_softmax(a: Var, axis: int = -1) -> Var:
    axis = axis % a.ndim
    shift = constant(np.max(a.value, axis=axis, keepdims=True))
    shifted = sub(a, expand(shift, a.shape))
    lse = log(sum(exp(shifted), (axis,), keepdims=True))
    return sub(shifted, expand(lse, a.shape))


def squared_error(prediction: Var, target: T.Tensor) -> Var:
    diff = sub(prediction, constant(target))
    return sum(mul(diff, diff))


def vdot(a: Var, b: Var) -> Var:
    return sum(mul(a, b))


# -- reverse sweep ------------------------------------------------------------


def _topological_order(root: Var) -> List[Var]:
    order: List[Var] = []
    visited = set()
    stack: List[Tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def grad(
    output: Var,
    inputs: Sequence[Var],
    grad_output: Optional[Var] = None,
    create_graph: bool = False,
) -> List[Var]:
    """Gradients of ``output`` with respect to ``inputs``.

    With ``create_graph`` the returned gradients are themselves differentiable.
    Inputs the output does not depend on get zero gradients.
    """
    if grad_output is None:
        grad_output = constant(np.ones_like(output.value))
    grads: Dict[int, Var] = {id(output): grad_output}
    if output.requires_grad:
        with recording(create_graph):
            for node in reversed(_topological_order(output)):
                upstream = grads.get(id(node))
                if upstream is None or node.backward is None:
                    continue
                for parent, contribution in zip(node.parents, node.backward(upstream)):
                    if contribution is None or not parent.requires_grad:
                        continue
                    existing = grads.get(id(parent))
                    grads[id(parent)] = (
                        contribution if existing is None else add(existing, contribution)
                    )
    results = []
    for var in inputs:
        found = grads.get(id(var))
        results.append(found if found is not None else constant(np.zeros_like(var.value)))
    return results
