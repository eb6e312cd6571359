"""Calibration and evaluation data.

Datasets are flat files of fixed-size records: label byte(s) followed by a
feature block. Two layouts are built in:

``cifar10``
    1 label byte, then 3x32x32 ``uint8`` pixels (channel-major), scaled to [0, 1].
``float32``
    1 label byte, then little-endian ``float32`` features of the manifest's
    input shape.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from snows import tensor as T
from snows.errors import DatasetError, DimensionError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecordLayout:
    name: str
    feature_shape: Tuple[int, ...]
    feature_dtype: str
    label_bytes: int = 1
    scale: float = 1.0

    @property
    def feature_bytes(self) -> int:
        return int(np.prod(self.feature_shape)) * np.dtype(self.feature_dtype).itemsize

    @property
    def record_bytes(self) -> int:
        return self.label_bytes + self.feature_bytes


CIFAR10 = RecordLayout("cifar10", (3, 32, 32), "u1", scale=1.0 / 255.0)


def layout_for(name: str, input_shape: Sequence[int]) -> RecordLayout:
    if name == "cifar10":
        if tuple(input_shape) != CIFAR10.feature_shape:
            raise DimensionError(f"cifar10 records are {CIFAR10.feature_shape}, network expects {tuple(input_shape)}")
        return CIFAR10
    if name == "float32":
        return RecordLayout("float32", tuple(int(s) for s in input_shape), "<f4")
    raise ValidationError(f"unknown record layout {name!r}; expected cifar10 or float32")


def read_records(
    path: Union[str, Path], layout: RecordLayout, dtype=np.float64
) -> Tuple[T.Tensor, np.ndarray]:
    """Features ``(n,) + feature_shape`` in ``dtype`` and integer labels ``(n,)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) % layout.record_bytes:
        raise DatasetError(
            f"{path}: {len(raw)} bytes is not a whole number of {layout.record_bytes}-byte "
            f"{layout.name} records"
        )
    n = len(raw) // layout.record_bytes
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, layout.record_bytes)
    label_block = records[:, : layout.label_bytes]
    labels = np.zeros(n, dtype=np.int64)
    for i in range(layout.label_bytes):
        labels = labels * 256 + label_block[:, i]
    features = np.frombuffer(
        np.ascontiguousarray(records[:, layout.label_bytes :]).tobytes(), dtype=layout.feature_dtype
    ).reshape((n,) + layout.feature_shape)
    x = T.as_tensor(features.astype(np.float64) * layout.scale, dtype)
    logger.info("read %d %s records from %s", n, layout.name, path)
    return x, labels


def write_records(
    path: Union[str, Path], x: T.Tensor, labels: Sequence[int], layout: RecordLayout
) -> None:
    x = np.asarray(x)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[1:] != layout.feature_shape or len(labels) != x.shape[0]:
        raise DimensionError(
            f"cannot write {x.shape} features with {len(labels)} labels as {layout.name} records"
        )
    if np.any(labels < 0) or np.any(labels >= 256**layout.label_bytes):
        raise ValidationError(f"labels do not fit in {layout.label_bytes} byte(s)")
    n = x.shape[0]
    label_block = np.zeros((n, layout.label_bytes), dtype=np.uint8)
    rest = labels.copy()
    for i in reversed(range(layout.label_bytes)):
        label_block[:, i] = rest % 256
        rest //= 256
    features = x / layout.scale if layout.scale != 1.0 else x
    if np.dtype(layout.feature_dtype).kind == "u":
        features = np.clip(np.rint(features), 0, 255)
    block = features.astype(layout.feature_dtype).reshape(n, -1).view(np.uint8)
    Path(path).write_bytes(np.concatenate([label_block, block], axis=1).tobytes())


def synthetic_gaussian(
    rng: T.Rng,
    n: int,
    input_shape: Sequence[int],
    classes: int = 10,
    separation: float = 1.0,
    noise: float = 1.0,
    dtype=np.float64,
) -> Tuple[T.Tensor, np.ndarray]:
    """Class-conditional Gaussian samples with balanced labels.

    Class means come from the ``means`` stream, labels and noise from ``data``;
    so regenerating with a larger ``n`` keeps the same class means.
    """
    if n < 0 or classes < 1:
        raise ValidationError(f"need n >= 0 and classes >= 1, got n={n}, classes={classes}")
    shape = tuple(int(s) for s in input_shape)
    means = rng.stream("means").standard_normal((classes,) + shape) * separation
    stream = rng.stream("data")
    labels = stream.permutation(np.arange(n) % classes)
    x = means[labels] + stream.standard_normal((n,) + shape) * noise
    return T.as_tensor(x, dtype), labels.astype(np.int64)


def calibration_sample(
    x: T.Tensor, n: Optional[int], rng: T.Rng, labels: Optional[np.ndarray] = None
):
    """First ``n`` samples after a seeded shuffle (``calibration`` stream)."""
    total = x.shape[0]
    if n is None or n >= total:
        n = total
    if n < 1:
        raise ValidationError(f"calibration size must be positive, got {n}")
    index = np.sort(rng.stream("calibration").permutation(total)[:n])
    picked = np.ascontiguousarray(x[index])
    if labels is None:
        return picked
    return picked, np.asarray(labels)[index]
