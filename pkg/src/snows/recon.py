"""The K-step reconstruction objective for one layer.

A ``ReconstructionTask`` fixes the sub-network, the pruned weight(s), their
masks, the cascaded input state ``X^l`` and the dense targets captured before
the layer was touched. Candidate weights ``w_hat`` are passed in *packed* form:
the weight's own shape when the task prunes a single tensor, otherwise the flat
row-major concatenation of the tensors in op order.

Loss is the raw sum of squared errors over all K+1 targets (no ``1/n``).
Active-set vectors list the kept coordinates in ascending packed flat index.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from snows import autodiff as ad
from snows import masks as M
from snows import netgraph
from snows import tensor as T
from snows.errors import DimensionError, DtypeError, MaskError, StructuralError, ValidationError

logger = logging.getLogger(__name__)


class ReconstructionTask:
    def __init__(
        self,
        sub: netgraph.SubNetwork,
        w_names: Sequence[str],
        masks: Sequence[M.Mask],
        inputs: netgraph.Activation,
        targets: Sequence[T.Tensor],
        chunk_size: Optional[int] = None,
        threads: int = 1,
    ):
        self.sub = sub
        self.w_names: Tuple[str, ...] = tuple(w_names)
        self.masks: Tuple[M.Mask, ...] = tuple(masks)
        self.inputs = netgraph.as_activation(inputs)
        self.targets: Tuple[T.Tensor, ...] = tuple(targets)
        self.chunk_size = chunk_size
        self.threads = max(1, int(threads))
        graph = sub.parent
        if not self.w_names:
            raise ValidationError("a reconstruction task needs at least one weight")
        if len(self.masks) != len(self.w_names):
            raise ValidationError(f"{len(self.masks)} masks for {len(self.w_names)} weights")
        for name, mask in zip(self.w_names, self.masks):
            if not sub.contains_weight(name):
                raise ValidationError(f"weight {name!r} is outside ops [{sub.start}, {sub.stop})")
            if mask.shape != graph.weights[name].shape:
                raise DimensionError(
                    f"mask for {name!r} has shape {mask.shape}, weight has {graph.weights[name].shape}"
                )
        if len(self.targets) != sub.horizon + 1:
            raise ValidationError(f"{len(self.targets)} targets for horizon K = {sub.horizon}")
        for target in self.targets:
            if target.shape[0] != self.inputs.n:
                raise DimensionError(f"target batch {target.shape[0]} vs input batch {self.inputs.n}")
        if chunk_size is not None and chunk_size < 1:
            raise ValidationError(f"chunk_size must be positive, got {chunk_size}")

        self.shapes = [graph.weights[n].shape for n in self.w_names]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = list(np.concatenate([[0], np.cumsum(sizes)]).astype(int))
        self.pattern = M.joint_pattern(self.masks)
        self.active = np.flatnonzero(self.pattern)

    # -- packing ------------------------------------------------------------

    @property
    def graph(self) -> netgraph.NetworkGraph:
        return self.sub.parent

    @property
    def dtype(self) -> np.dtype:
        return self.graph.dtype

    @property
    def n(self) -> int:
        return self.inputs.n

    @property
    def m(self) -> int:
        return int(self.active.size)

    @property
    def numel(self) -> int:
        return int(self.offsets[-1])

    @property
    def horizon(self) -> int:
        return self.sub.horizon

    @property
    def packed_shape(self) -> Tuple[int, ...]:
        return self.shapes[0] if len(self.shapes) == 1 else (self.numel,)

    @property
    def label(self) -> str:
        return "+".join(self.w_names)

    def pack(self, weights: Mapping[str, T.Tensor]) -> T.Tensor:
        if len(self.w_names) == 1:
            return np.array(weights[self.w_names[0]], dtype=self.dtype)
        return np.concatenate([np.asarray(weights[n], dtype=self.dtype).ravel() for n in self.w_names])

    def unpack(self, w_hat: T.Tensor) -> Dict[str, T.Tensor]:
        flat = np.asarray(w_hat).ravel()
        return {
            name: flat[self.offsets[i] : self.offsets[i + 1]].reshape(self.shapes[i]).copy()
            for i, name in enumerate(self.w_names)
        }

    def dense_weights(self) -> T.Tensor:
        return self.pack(self.graph.weights)

    def initial_weights(self) -> T.Tensor:
        """Dense weights with the masks applied: ``W * Z``."""
        return self.pack(
            {n: M.apply(self.graph.weights[n], z) for n, z in zip(self.w_names, self.masks)}
        )

    def _overrides(self, w: ad.Var) -> Dict[str, ad.Var]:
        if len(self.w_names) == 1:
            return {self.w_names[0]: w}
        return {
            name: ad.reshape(ad.take_range(w, self.offsets[i], self.offsets[i + 1]), self.shapes[i])
            for i, name in enumerate(self.w_names)
        }

    def check_weights(self, w_hat: T.Tensor) -> T.Tensor:
        w_hat = np.asarray(w_hat)
        if w_hat.shape != self.packed_shape:
            raise DimensionError(f"weights of shape {w_hat.shape}, task expects {self.packed_shape}")
        if w_hat.dtype != self.dtype:
            raise DtypeError(f"weights are {w_hat.dtype}, task runs in {self.dtype}")
        off_mask = w_hat.ravel()[~self.pattern]
        if np.any(off_mask != 0):
            raise MaskError(
                f"{self.label}: {int(np.count_nonzero(off_mask))} masked entries are non-zero"
            )
        return w_hat

    # -- chunked evaluation -------------------------------------------------

    def chunks(self) -> List[Tuple[int, int]]:
        size = self.chunk_size or self.n
        return [(lo, min(lo + size, self.n)) for lo in range(0, self.n, size)] or [(0, 0)]

    def _chunk_state(self, lo: int, hi: int):
        if (lo, hi) == (0, self.n):
            return self.inputs, self.targets
        index = np.arange(lo, hi)
        return self.inputs.take(index), tuple(t[lo:hi] for t in self.targets)

    def map_chunks(self, fn: Callable[[netgraph.Activation, Sequence[T.Tensor]], object]) -> list:
        """Run ``fn`` on every chunk; results come back in chunk order."""

        def run(bounds):
            state, targets = self._chunk_state(*bounds)
            return fn(state, targets)

        bounds = self.chunks()
        if self.threads == 1 or len(bounds) == 1:
            return [run(b) for b in bounds]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(run, bounds))

    def chunk_loss_var(self, w: ad.Var, state, targets) -> ad.Var:
        outputs = netgraph.capture_vars(self.sub, state, self._overrides(w))
        return netgraph.reconstruction_loss(outputs, targets)

    def differentiable_gradients(self, w_hat: T.Tensor) -> List[Tuple[ad.Var, ad.Var]]:
        """Per chunk, the weight variable and its gradient built with ``create_graph``."""
        w_hat = self.check_weights(w_hat)

        def build(state, targets):
            w = ad.variable(w_hat)
            with ad.recording(True):
                loss = self.chunk_loss_var(w, state, targets)
            (g,) = ad.grad(loss, [w], create_graph=True)
            return w, g

        return self.map_chunks(build)

    def shuffled_order(self, rng: np.random.Generator) -> np.ndarray:
        """Seeded permutation of sample indices used to form mini-batches."""
        return rng.permutation(self.n)


def build_task(
    graph: netgraph.NetworkGraph,
    w_names: Sequence[str],
    state,
    horizon: int,
    masks: Optional[Sequence[M.Mask]] = None,
    chunk_size: Optional[int] = None,
    threads: int = 1,
) -> ReconstructionTask:
    """Capture dense targets for the op owning ``w_names`` and return its task.

    ``state`` is the (cascaded) activation entering that op. Targets are taken
    from ``graph`` as it stands, so downstream weights must still be dense.
    """
    owners = {graph.owner(n) for n in w_names}
    if len(owners) != 1:
        raise StructuralError(f"weights {list(w_names)} belong to different ops {sorted(owners)}")
    start = owners.pop()
    state = netgraph.as_activation(state)
    sub = graph.subnetwork(start, horizon)
    targets = netgraph.forward_capture(sub, state)
    if masks is None:
        masks = [M.ones_mask(graph.weights[n].shape) for n in w_names]
    return ReconstructionTask(sub, w_names, masks, state, targets, chunk_size, threads)


def loss(task: ReconstructionTask, w_hat: T.Tensor) -> float:
    """``sum_k ||Y^{l+k} - f^{l:l+k}(X^l, w_hat)||^2``."""
    w_hat = task.check_weights(w_hat)

    def evaluate(state, targets):
        with ad.no_grad():
            return float(task.chunk_loss_var(ad.constant(w_hat), state, targets).value)

    return float(np.sum(task.map_chunks(evaluate)))


def grad_full(task: ReconstructionTask, w_hat: T.Tensor) -> T.Tensor:
    """Gradient in packed shape, masked coordinates included."""
    w_hat = task.check_weights(w_hat)

    def evaluate(state, targets):
        w = ad.variable(w_hat)
        with ad.recording(True):
            value = task.chunk_loss_var(w, state, targets)
        (g,) = ad.grad(value, [w])
        return g.value

    parts = task.map_chunks(evaluate)
    total = parts[0].copy()
    for part in parts[1:]:
        total += part
    return total


def grad_active(task: ReconstructionTask, w_hat: T.Tensor) -> T.Tensor:
    """Gradient restricted to kept coordinates, ascending flat index."""
    return np.ascontiguousarray(grad_full(task, w_hat).ravel()[task.active])


def batch_count(task: ReconstructionTask, batch_size: int) -> int:
    if batch_size < 1:
        raise ValidationError(f"batch_size must be positive, got {batch_size}")
    return -(-task.n // batch_size)


def batch_view(
    task: ReconstructionTask,
    batch_index: int,
    batch_size: int,
    order: Optional[np.ndarray] = None,
) -> ReconstructionTask:
    """The task restricted to mini-batch ``batch_index`` of ``order``.

    Batches are consecutive slices of ``order`` (identity when omitted); the
    last one may be short. Samples inside a batch keep ascending index order.
    """
    count = batch_count(task, batch_size)
    if not 0 <= batch_index < count:
        raise ValidationError(f"batch index {batch_index} out of range [0, {count})")
    if order is None:
        order = np.arange(task.n)
    elif len(order) != task.n:
        raise ValidationError(f"order has {len(order)} entries for {task.n} samples")
    index = np.sort(np.asarray(order[batch_index * batch_size : (batch_index + 1) * batch_size]))
    return ReconstructionTask(
        task.sub,
        task.w_names,
        task.masks,
        task.inputs.take(index),
        [np.ascontiguousarray(t[index]) for t in task.targets],
        task.chunk_size,
        task.threads,
    )


def with_horizon(task: ReconstructionTask, horizon: int) -> ReconstructionTask:
    """Same layer and masks with targets recaptured at a different horizon."""
    graph = task.graph
    sub = graph.subnetwork(task.sub.start, horizon)
    targets = netgraph.forward_capture(sub, task.inputs)
    return ReconstructionTask(
        sub, task.w_names, task.masks, task.inputs, targets, task.chunk_size, task.threads
    )


def per_sample_losses(task: ReconstructionTask, w_hat: T.Tensor) -> T.Tensor:
    w_hat = task.check_weights(w_hat)
    out = np.empty(task.n, dtype=task.dtype)
    with ad.no_grad():
        for i in range(task.n):
            state = task.inputs.take(np.array([i]))
            value = task.chunk_loss_var(ad.constant(w_hat), state, [t[i : i + 1] for t in task.targets])
            out[i] = value.value
    return out


def per_sample_grads(task: ReconstructionTask, w_hat: T.Tensor) -> T.Tensor:
    """Active-set gradients of each sample's loss, shape ``(n, m)``."""
    w_hat = task.check_weights(w_hat)
    out = np.empty((task.n, task.m), dtype=task.dtype)
    for i in range(task.n):
        state = task.inputs.take(np.array([i]))
        w = ad.variable(w_hat)
        with ad.recording(True):
            value = task.chunk_loss_var(w, state, [t[i : i + 1] for t in task.targets])
        (g,) = ad.grad(value, [w])
        out[i] = g.value.ravel()[task.active]
    return out
