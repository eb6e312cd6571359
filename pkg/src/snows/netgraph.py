"""Networks as ordered op sequences.

A ``NetworkGraph`` owns an immutable weight store and a statically checked op
sequence. ``SubNetwork`` picks the slice ``f^{l:l+k}`` a layer's
reconstruction problem runs through: from the op consuming the pruned weight to
the K-th following op flagged as a target.

The state entering op ``i`` is an ``Activation``: the tensor plus the stack of
open residual branches, so sub-networks that start inside a residual block get
their skip inputs from the cascaded forward pass.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from snows import autodiff as ad
from snows import tensor as T
from snows.errors import DimensionError, DtypeError, StructuralError, ValidationError
from snows.ops import KINDS, OPS

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "snows-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class OpSpec:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    weight_names: Tuple[str, ...] = ()
    is_target: bool = False
    name: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "params": dict(self.params),
            "weights": list(self.weight_names),
            "target": self.is_target,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "OpSpec":
        return cls(
            kind=data["kind"],
            params=dict(data.get("params", {})),
            weight_names=tuple(data.get("weights", ())),
            is_target=bool(data.get("target", False)),
            name=data.get("name", ""),
        )


@dataclass(frozen=True)
class Activation:
    """Tensor entering an op, plus the skip tensors of open residual branches."""

    x: T.Tensor
    skips: Tuple[T.Tensor, ...] = ()

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def take(self, indices: np.ndarray) -> "Activation":
        return Activation(
            np.ascontiguousarray(self.x[indices]),
            tuple(np.ascontiguousarray(s[indices]) for s in self.skips),
        )


def as_activation(x: Union[T.Tensor, Activation]) -> Activation:
    return x if isinstance(x, Activation) else Activation(x)


class NetworkGraph:
    """Ordered ops with named weights; immutable once built."""

    def __init__(
        self,
        ops: Sequence[OpSpec],
        weights: Mapping[str, T.Tensor],
        prunable: Sequence[str],
        input_shape: Sequence[int],
        dtype=None,
    ):
        self.ops: Tuple[OpSpec, ...] = tuple(ops)
        self.input_shape: Tuple[int, ...] = tuple(int(s) for s in input_shape)
        if dtype is None:
            dtype = next(iter(weights.values())).dtype if weights else np.float64
        self.dtype = T.resolve_dtype(dtype)
        store = {}
        for name, value in weights.items():
            array = T.as_tensor(value, self.dtype).copy()
            array.setflags(write=False)
            store[name] = array
        self.weights: Dict[str, T.Tensor] = store
        self.prunable: Tuple[str, ...] = tuple(prunable)
        self._owner: Dict[str, int] = {}
        self.in_shapes: List[Tuple[int, ...]] = []
        self.skip_depth: List[int] = []
        self._check()

    def _check(self) -> None:
        for index, op in enumerate(self.ops):
            if op.kind not in KINDS:
                raise StructuralError(f"op {index}: unknown kind {op.kind!r}")
            for name in op.weight_names:
                if name not in self.weights:
                    raise StructuralError(f"op {index} ({op.kind}): weight {name!r} not in store")
                if name in self._owner:
                    raise StructuralError(f"weight {name!r} owned by ops {self._owner[name]} and {index}")
                self._owner[name] = index
        for name in self.prunable:
            if name not in self._owner:
                raise StructuralError(f"prunable weight {name!r} is not used by any op")
            op = self.ops[self._owner[name]]
            role = OPS[op.kind].weight_roles + OPS[op.kind].optional_roles
            position = op.weight_names.index(name)
            if role[position] not in OPS[op.kind].prunable_roles:
                raise StructuralError(f"weight {name!r} ({op.kind} {role[position]}) is not prunable")
            if not any(o.is_target for o in self.ops[self._owner[name]:]):
                raise StructuralError(f"no target op at or after the op consuming {name!r}")
        self._shape_pass()

    def _shape_pass(self) -> None:
        shape = self.input_shape
        stack: List[Tuple[int, ...]] = []
        for index, op in enumerate(self.ops):
            self.in_shapes.append(shape)
            self.skip_depth.append(len(stack))
            if op.kind == "residual_begin":
                stack.append(shape)
                continue
            if op.kind == "residual_add":
                if not stack:
                    raise StructuralError(f"op {index}: residual_add without residual_begin")
                skip = stack.pop()
                if skip != shape:
                    raise DimensionError(f"op {index}: residual shapes {skip} and {shape} differ")
                continue
            kind = OPS[op.kind]
            kind.check_weights(op.weight_names)
            try:
                shape = kind.output_shape(
                    op.params, shape, [self.weights[n].shape for n in op.weight_names]
                )
            except (DimensionError, StructuralError) as exc:
                raise type(exc)(f"op {index} ({op.kind}): {exc}") from exc
        if stack:
            raise StructuralError(f"{len(stack)} residual_begin op(s) never closed")
        self.output_shape = shape

    # -- structure ----------------------------------------------------------

    def owner(self, w_name: str) -> int:
        try:
            return self._owner[w_name]
        except KeyError:
            raise ValidationError(f"unknown weight {w_name!r}") from None

    def prunable_groups(self) -> List[Tuple[int, Tuple[str, ...]]]:
        """Prunable weights grouped by owning op, in manifest order."""
        groups: Dict[int, List[str]] = {}
        for name in self.prunable:
            groups.setdefault(self._owner[name], []).append(name)
        ordered = []
        for index in sorted(groups):
            names = groups[index]
            in_op_order = tuple(n for n in self.ops[index].weight_names if n in names)
            ordered.append((index, in_op_order))
        return ordered

    def target_indices_from(self, start: int) -> List[int]:
        return [i for i in range(start, len(self.ops)) if self.ops[i].is_target]

    def subnetwork(self, start: int, horizon: int) -> "SubNetwork":
        """The sub-graph from op ``start`` through its ``K(l)+1`` targets."""
        if horizon < 0:
            raise ValidationError(f"horizon must be non-negative, got {horizon}")
        targets = self.target_indices_from(start)
        if not targets:
            raise StructuralError(f"no target op at or after op {start}")
        k_max = len(targets) - 1
        effective = min(horizon, k_max)
        return SubNetwork(self, start, effective, tuple(targets[: effective + 1]), k_max)

    def replace_weights(self, updates: Mapping[str, T.Tensor]) -> "NetworkGraph":
        """Commit new values for existing weights; returns a new graph."""
        weights = dict(self.weights)
        for name, value in updates.items():
            if name not in weights:
                raise ValidationError(f"unknown weight {name!r}")
            if tuple(value.shape) != weights[name].shape:
                raise DimensionError(
                    f"weight {name!r}: new shape {tuple(value.shape)} vs {weights[name].shape}"
                )
            weights[name] = value
        return NetworkGraph(self.ops, weights, self.prunable, self.input_shape, self.dtype)

    def with_dtype(self, dtype) -> "NetworkGraph":
        if T.resolve_dtype(dtype) == self.dtype:
            return self
        return NetworkGraph(self.ops, self.weights, self.prunable, self.input_shape, dtype)

    # -- execution ----------------------------------------------------------

    def check_input(self, index: int, state: Activation) -> None:
        expected = self.in_shapes[index]
        if tuple(state.x.shape[1:]) != expected:
            raise DimensionError(
                f"op {index} ({self.ops[index].kind}) expects input {expected}, "
                f"got {tuple(state.x.shape[1:])}"
            )
        if len(state.skips) != self.skip_depth[index]:
            raise DimensionError(
                f"op {index} expects {self.skip_depth[index]} open residual branch(es), "
                f"got {len(state.skips)}"
            )
        if state.x.dtype != self.dtype:
            raise DtypeError(f"input dtype {state.x.dtype} vs graph dtype {self.dtype}")

    def execute(
        self,
        state: Activation,
        start: int,
        stop: int,
        overrides: Optional[Mapping[str, ad.Var]] = None,
        capture: Iterable[int] = (),
    ) -> Tuple[ad.Var, List[ad.Var], Dict[int, ad.Var]]:
        """Run ops ``[start, stop)`` on ``state``.

        Returns the final tensor, the open skip stack and the outputs of the ops
        listed in ``capture``. ``overrides`` substitutes (possibly differentiable)
        values for named weights.
        """
        self.check_input(start, state)
        overrides = overrides or {}
        capture = set(capture)
        x = ad.constant(state.x)
        skips = [ad.constant(s) for s in state.skips]
        captured: Dict[int, ad.Var] = {}
        for index in range(start, stop):
            op = self.ops[index]
            if op.kind == "residual_begin":
                skips.append(x)
            elif op.kind == "residual_add":
                x = ad.add(x, skips.pop())
            else:
                weights = [
                    overrides[n] if n in overrides else ad.constant(self.weights[n])
                    for n in op.weight_names
                ]
                try:
                    x = OPS[op.kind].forward(x, weights, op.params)
                except DimensionError as exc:
                    raise DimensionError(f"op {index} ({op.kind}): {exc}") from exc
            if index in capture:
                captured[index] = x
        return x, skips, captured

    def advance(self, state: Activation, start: int, stop: int) -> Activation:
        """Forward ``state`` from op ``start`` to the input of op ``stop``."""
        if start == stop:
            return state
        with ad.no_grad():
            x, skips, _ = self.execute(state, start, stop)
        return Activation(x.value, tuple(s.value for s in skips))

    def state_at(self, index: int, x0: T.Tensor) -> Activation:
        return self.advance(Activation(T.as_tensor(x0, self.dtype)), 0, index)

    # -- manifest -----------------------------------------------------------

    def to_manifest(self) -> Dict[str, Any]:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "input_shape": list(self.input_shape),
            "dtype": str(self.dtype),
            "ops": [op.to_dict() for op in self.ops],
            "weight_shapes": {n: list(w.shape) for n, w in sorted(self.weights.items())},
            "prunable": list(self.prunable),
        }

    @classmethod
    def from_manifest(
        cls, manifest: Mapping[str, Any], weights: Mapping[str, T.Tensor], dtype=None
    ) -> "NetworkGraph":
        validate_manifest(manifest)
        for name, shape in manifest.get("weight_shapes", {}).items():
            if name not in weights:
                raise StructuralError(f"weight {name!r} listed in manifest but not provided")
            if tuple(weights[name].shape) != tuple(shape):
                raise DimensionError(
                    f"weight {name!r}: manifest shape {tuple(shape)} vs {tuple(weights[name].shape)}"
                )
        return cls(
            [OpSpec.from_dict(op) for op in manifest["ops"]],
            weights,
            manifest.get("prunable", ()),
            manifest["input_shape"],
            dtype or manifest.get("dtype"),
        )


@dataclass(frozen=True)
class SubNetwork:
    parent: NetworkGraph
    start: int
    horizon: int
    target_indices: Tuple[int, ...]
    k_max: int

    @property
    def stop(self) -> int:
        return self.target_indices[-1] + 1

    def contains_weight(self, w_name: str) -> bool:
        index = self.parent.owner(w_name)
        return self.start <= index < self.stop


def forward(g: NetworkGraph, x0: T.Tensor) -> T.Tensor:
    """Output of the last op for a batch ``x0`` of shape ``(n,) + input_shape``."""
    x0 = T.as_tensor(x0, g.dtype)
    if tuple(x0.shape[1:]) != g.input_shape:
        raise DimensionError(f"input shape {tuple(x0.shape[1:])} vs declared {g.input_shape}")
    with ad.no_grad():
        out, _, _ = g.execute(Activation(x0), 0, len(g.ops))
    return out.value


def capture_vars(
    sub: SubNetwork,
    state: Union[T.Tensor, Activation],
    overrides: Optional[Mapping[str, ad.Var]] = None,
) -> List[ad.Var]:
    _, _, captured = sub.parent.execute(
        as_activation(state), sub.start, sub.stop, overrides, sub.target_indices
    )
    return [captured[i] for i in sub.target_indices]


def forward_capture(
    sub: SubNetwork,
    x: Union[T.Tensor, Activation],
    weights: Optional[Mapping[str, T.Tensor]] = None,
) -> List[T.Tensor]:
    """Outputs at the sub-network's K+1 targets, in order k = 0..K."""
    overrides = {n: ad.constant(v) for n, v in (weights or {}).items()}
    with ad.no_grad():
        return [v.value for v in capture_vars(sub, x, overrides)]


def reconstruction_loss(outputs: Sequence[ad.Var], targets: Sequence[T.Tensor]) -> ad.Var:
    """``sum_k ||Y^{l+k} - y^{l+k}||^2`` as a differentiable scalar."""
    if len(outputs) != len(targets):
        raise ValidationError(f"{len(outputs)} outputs vs {len(targets)} targets")
    total = None
    for out, target in zip(outputs, targets):
        if out.shape != target.shape:
            raise DimensionError(f"target shape {target.shape} vs output {out.shape}")
        term = ad.squared_error(out, target)
        total = term if total is None else ad.add(total, term)
    return total


def grad_wrt_layer(
    sub: SubNetwork,
    loss_targets: Sequence[T.Tensor],
    w_name: str,
    x: Union[T.Tensor, Activation],
    weights: Optional[Mapping[str, T.Tensor]] = None,
) -> T.Tensor:
    """Gradient of the K-step loss with respect to weight ``w_name`` only."""
    if not sub.contains_weight(w_name):
        raise ValidationError(
            f"weight {w_name!r} (op {sub.parent.owner(w_name)}) is outside ops "
            f"[{sub.start}, {sub.stop})"
        )
    current = (weights or {}).get(w_name, sub.parent.weights[w_name])
    w = ad.variable(T.as_tensor(current, sub.parent.dtype))
    loss = reconstruction_loss(capture_vars(sub, x, {w_name: w}), loss_targets)
    (g,) = ad.grad(loss, [w])
    return g.value


# -- manifest files -----------------------------------------------------------


def validate_manifest(manifest: Mapping[str, Any]) -> None:
    if manifest.get("format") != MANIFEST_FORMAT:
        raise StructuralError(f"not a {MANIFEST_FORMAT} document")
    if manifest.get("version") != MANIFEST_VERSION:
        raise StructuralError(f"unsupported manifest version {manifest.get('version')!r}")
    for key in ("input_shape", "ops"):
        if key not in manifest:
            raise StructuralError(f"manifest missing {key!r}")


def canonical_json(document: Mapping[str, Any]) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"))


def manifest_hash(manifest: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(manifest).encode("utf-8")).hexdigest()


def save_manifest(manifest: Mapping[str, Any], path: Union[str, Path]) -> None:
    validate_manifest(manifest)
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StructuralError(f"manifest {path} is not valid JSON: {exc}") from exc
    validate_manifest(manifest)
    return manifest
