"""Binary sparsity masks: magnitude selection, N:M patterns, persistence.

N:M groups run along the input-channel axis ``d_in``: axis 1 for convolution
weights ``(d_out, d_in, kh, kw)`` and axis 0 for dense and attention weights
``(d_in, d_out)``. A group is M contiguous entries along that axis for a fixed
position on every other axis.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Union

import numpy as np

from snows import checkpoint
from snows import tensor as T
from snows.errors import CheckpointError, DimensionError, MaskError, StructuralError, ValidationError

logger = logging.getLogger(__name__)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class Unstructured:
    sparsity: float

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValidationError(f"sparsity must lie in [0, 1], got {self.sparsity}")

    def to_dict(self) -> Dict[str, Any]:
        return {"type": "unstructured", "sparsity": self.sparsity}


@dataclass(frozen=True)
class NOfM:
    n: int
    m: int

    def __post_init__(self):
        if not 1 <= self.n <= self.m:
            raise ValidationError(f"N:M needs 1 <= N <= M, got {self.n}:{self.m}")

    def to_dict(self) -> Dict[str, Any]:
        return {"type": "n_of_m", "n": self.n, "m": self.m}


MaskKind = Union[Unstructured, NOfM]


def kind_from_dict(data: Mapping[str, Any]) -> MaskKind:
    kind = data.get("type")
    if kind == "unstructured":
        return Unstructured(float(data["sparsity"]))
    if kind == "n_of_m":
        return NOfM(int(data["n"]), int(data["m"]))
    raise MaskError(f"unknown mask kind {kind!r}")


def group_axis(shape: Sequence[int]) -> int:
    """The ``d_in`` axis of a weight tensor."""
    if len(shape) == 4:
        return 1
    if len(shape) == 2:
        return 0
    raise DimensionError(f"N:M grouping needs a rank-2 or rank-4 weight, got shape {tuple(shape)}")


def _groups(values: np.ndarray, m: int) -> np.ndarray:
    """View ``values`` as ``(groups, m)`` rows, one row per N:M group."""
    axis = group_axis(values.shape)
    d_in = values.shape[axis]
    if d_in % m:
        raise StructuralError(f"d_in = {d_in} (shape {values.shape}) is not divisible by M = {m}")
    moved = np.moveaxis(values, axis, -1)
    return np.ascontiguousarray(moved).reshape(-1, m)


def _ungroup(rows: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    axis = group_axis(shape)
    moved_shape = tuple(s for i, s in enumerate(shape) if i != axis) + (shape[axis],)
    return np.ascontiguousarray(np.moveaxis(rows.reshape(moved_shape), -1, axis))


@dataclass(frozen=True)
class Mask:
    pattern: np.ndarray
    kind: MaskKind

    def __post_init__(self):
        pattern = np.array(self.pattern, dtype=bool, copy=True)
        pattern.setflags(write=False)
        object.__setattr__(self, "pattern", pattern)

    @property
    def shape(self):
        return self.pattern.shape

    @property
    def numel(self) -> int:
        return int(self.pattern.size)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.pattern))

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.numel if self.numel else 0.0

    def active_indices(self) -> np.ndarray:
        """Flat indices of kept entries, ascending."""
        return np.flatnonzero(self.pattern.ravel())

    def validate(self) -> None:
        if isinstance(self.kind, Unstructured):
            zeros = self.numel - self.nnz
            expected = round_half_up(self.kind.sparsity * self.numel)
            if zeros != expected:
                raise MaskError(
                    f"unstructured mask has {zeros} zeros, expected {expected} "
                    f"for sparsity {self.kind.sparsity}"
                )
            return
        counts = _groups(self.pattern, self.kind.m).sum(axis=1)
        bad = np.flatnonzero(counts != self.kind.n)
        if bad.size:
            raise MaskError(
                f"N:M group {int(bad[0])} keeps {int(counts[bad[0]])} entries, "
                f"expected {self.kind.n} of {self.kind.m}"
            )


def ones_mask(shape: Sequence[int]) -> Mask:
    return Mask(np.ones(tuple(shape), dtype=bool), Unstructured(0.0))


def magnitude_mask_unstructured(w: T.Tensor, s: float) -> Mask:
    """Zero the ``round(s * numel)`` smallest-magnitude entries.

    Ties go to the lower flat index (a stable sort), so equal magnitudes are
    pruned front to back.
    """
    kind = Unstructured(float(s))
    flat = np.abs(np.asarray(w)).ravel()
    pruned = round_half_up(kind.sparsity * flat.size)
    pattern = np.ones(flat.size, dtype=bool)
    pattern[np.argsort(flat, kind="stable")[:pruned]] = False
    return Mask(pattern.reshape(np.shape(w)), kind)


def magnitude_mask_nm(w: T.Tensor, n: int, m: int) -> Mask:
    """Keep the ``n`` largest-magnitude entries of every group of ``m`` along ``d_in``."""
    kind = NOfM(int(n), int(m))
    rows = _groups(np.abs(np.asarray(w)), kind.m)
    order = np.argsort(-rows, axis=1, kind="stable")
    keep = np.zeros(rows.shape, dtype=bool)
    np.put_along_axis(keep, order[:, : kind.n], True, axis=1)
    return Mask(_ungroup(keep, np.shape(w)), kind)


def apply(w: T.Tensor, z: Mask) -> T.Tensor:
    """``w`` with masked entries set to exactly ``+0.0``."""
    if tuple(np.shape(w)) != z.shape:
        raise DimensionError(f"mask shape {z.shape} vs weight shape {tuple(np.shape(w))}")
    return np.where(z.pattern, w, w.dtype.type(0)).astype(w.dtype, copy=False)


def is_consistent(w: T.Tensor, z: Mask) -> bool:
    return bool(np.all(w[~z.pattern] == 0))


def joint_pattern(masks: Sequence[Mask]) -> np.ndarray:
    """Flat concatenation of several masks' patterns, in the given order."""
    return np.concatenate([z.pattern.ravel() for z in masks]) if masks else np.zeros(0, dtype=bool)


def export_mask(z: Mask, path: Union[str, Path], name: str = "mask", dtype=np.float64) -> None:
    export_masks({name: z}, path, dtype=dtype)


def export_masks(masks: Mapping[str, Mask], path: Union[str, Path], dtype=np.float64) -> None:
    dtype = T.resolve_dtype(dtype)
    ckpt = checkpoint.Checkpoint(
        tensors={checkpoint.MASK_PREFIX + n: masks[n].pattern.astype(dtype) for n in sorted(masks)},
        mask_kinds={n: masks[n].kind.to_dict() for n in sorted(masks)},
    )
    checkpoint.save_checkpoint(path, ckpt)


def _from_stored(name: str, values: np.ndarray, kind: Optional[Mapping[str, Any]]) -> Mask:
    if not np.all((values == 0) | (values == 1)):
        raise MaskError(f"mask {name!r} holds values other than 0 and 1")
    pattern = values == 1
    if kind is None:
        zeros = int(pattern.size - np.count_nonzero(pattern))
        mask_kind: MaskKind = Unstructured(zeros / pattern.size if pattern.size else 0.0)
    else:
        mask_kind = kind_from_dict(kind)
    mask = Mask(pattern, mask_kind)
    try:
        mask.validate()
    except (MaskError, StructuralError) as exc:
        raise MaskError(f"mask {name!r}: {exc}") from exc
    return mask


def import_masks(path: Union[str, Path]) -> Dict[str, Mask]:
    ckpt = checkpoint.load_checkpoint(path)
    return {
        name: _from_stored(name, values, ckpt.mask_kinds.get(name))
        for name, values in ckpt.masks().items()
    }


def import_mask(
    path: Union[str, Path],
    name: Optional[str] = None,
    like: Optional[T.Tensor] = None,
    kind: Optional[MaskKind] = None,
) -> Mask:
    """Read one mask from a checkpoint container and check it against its target.

    ``name`` may be omitted when the file holds a single mask. ``like`` is the
    weight the mask will be applied to; ``kind`` is the expected mask kind.
    """
    masks = import_masks(path)
    if name is None:
        if len(masks) != 1:
            raise MaskError(f"{path} holds {len(masks)} masks; name the one to import")
        name = next(iter(masks))
    if name not in masks:
        raise CheckpointError(f"{path} has no mask for {name!r}; found {sorted(masks)}")
    mask = masks[name]
    if like is not None and tuple(np.shape(like)) != mask.shape:
        raise MaskError(
            f"imported mask {name!r} has shape {mask.shape}, weight has {tuple(np.shape(like))}"
        )
    if kind is not None and type(kind) is not type(mask.kind):
        raise MaskError(f"imported mask {name!r} is {mask.kind}, expected {kind}")
    if isinstance(kind, NOfM) and kind != mask.kind:
        raise MaskError(f"imported mask {name!r} is {mask.kind}, expected {kind}")
    logger.debug("imported mask %s from %s: %d/%d kept", name, path, mask.nnz, mask.numel)
    return mask
