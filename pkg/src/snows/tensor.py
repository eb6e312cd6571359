"""Dense tensor arithmetic, shape algebra and seeded randomness.

Tensors are C-contiguous numpy arrays of ``float32`` or ``float64``. The helpers
here add the checks numpy does not make for us: no implicit broadcasting
(scalars excepted) and no mixed-dtype arithmetic.

Summation order: ``reduce`` delegates to numpy, which sums contiguous runs
pairwise in row-major order. Reference checks compare against compensated
summation in double precision.
"""

import hashlib
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from snows.errors import DimensionError, DtypeError, ValidationError

Tensor = np.ndarray
Axes = Union[None, int, Sequence[int]]

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def resolve_dtype(dtype) -> np.dtype:
    """Map ``"float32"``/``"float64"`` (or numpy dtypes) to a supported dtype."""
    resolved = np.dtype(dtype)
    if resolved not in SUPPORTED_DTYPES:
        raise DtypeError(f"unsupported dtype {resolved}; expected float32 or float64")
    return resolved


def as_tensor(data, dtype=None) -> Tensor:
    """Return ``data`` as a contiguous tensor of a supported dtype."""
    if dtype is None:
        dtype = getattr(data, "dtype", np.float64)
        if np.dtype(dtype) not in SUPPORTED_DTYPES:
            dtype = np.float64
    return np.ascontiguousarray(data, dtype=resolve_dtype(dtype))


def zeros(shape: Iterable[int], dtype=np.float64) -> Tensor:
    return np.zeros(tuple(shape), dtype=resolve_dtype(dtype))


def ones(shape: Iterable[int], dtype=np.float64) -> Tensor:
    return np.ones(tuple(shape), dtype=resolve_dtype(dtype))


def eye(n: int, dtype=np.float64) -> Tensor:
    return np.eye(n, dtype=resolve_dtype(dtype))


def check_same_dtype(*tensors: Tensor) -> np.dtype:
    dtypes = {np.dtype(t.dtype) for t in tensors}
    if len(dtypes) != 1:
        raise DtypeError(f"mixed dtypes {sorted(str(d) for d in dtypes)}")
    return dtypes.pop()


def check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions must agree exactly."""
    check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def erf(x: Tensor) -> Tensor:
    """Error function (Cephes rational approximations via scipy)."""
    return special.erf(x)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF evaluated through erf."""
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_grad(x: Tensor) -> Tensor:
    """First derivative of the exact GeLU: ``Phi(x) + x * phi(x)``."""
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x * _SQRT_HALF)) + x * pdf


def gelu_hess(x: Tensor) -> Tensor:
    """Second derivative of the exact GeLU: ``phi(x) * (2 - x**2)``."""
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return pdf * (2.0 - x * x)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def elementwise(op: str, *args) -> Tensor:
    """Pointwise ``add``, ``sub``, ``mul``, ``relu``, ``gelu`` or ``scale``.

    Binary ops need identical shapes and dtypes. ``scale`` takes a python
    scalar and a tensor (in either order).
    """
    if op in ("relu", "gelu"):
        (x,) = args
        return relu(x) if op == "relu" else gelu(x)
    if op == "scale":
        a, b = args
        scalar, tensor = (a, b) if np.isscalar(a) else (b, a)
        if not np.isscalar(scalar):
            raise DimensionError("scale needs one scalar operand")
        return (tensor * tensor.dtype.type(scalar)).astype(tensor.dtype, copy=False)
    if op in ("add", "sub", "mul"):
        a, b = args
        check_same_dtype(a, b)
        check_same_shape(a, b)
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        return a * b
    raise ValidationError(f"unknown elementwise op {op!r}")


def reduce(op: str, t: Tensor, axes: Axes = None) -> Tensor:
    """Reduce with ``sum``, ``sumsq`` or ``max`` over ``axes`` (all when None)."""
    if axes is not None:
        axes_tuple = (axes,) if isinstance(axes, int) else tuple(axes)
        for ax in axes_tuple:
            if not -t.ndim <= ax < t.ndim:
                raise DimensionError(f"axis {ax} out of range for shape {t.shape}")
        axes = axes_tuple
    if op == "sum":
        return np.asarray(np.sum(t, axis=axes), dtype=t.dtype)
    if op == "sumsq":
        return np.asarray(np.sum(t * t, axis=axes), dtype=t.dtype)
    if op == "max":
        reduced = range(t.ndim) if axes is None else axes
        if any(t.shape[ax] == 0 for ax in reduced) or t.size == 0:
            raise DimensionError(f"max over an empty axis of shape {t.shape}")
        return np.asarray(np.max(t, axis=axes), dtype=t.dtype)
    raise ValidationError(f"unknown reduction {op!r}")


def sumsq(t: Tensor) -> float:
    return float(reduce("sumsq", t))


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != t.size and -1 not in shape:
        raise DimensionError(f"cannot reshape {t.shape} to {shape}")
    return np.ascontiguousarray(t.reshape(shape))


def expand(t: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``t`` to ``shape`` (materialized)."""
    try:
        return np.ascontiguousarray(np.broadcast_to(t, tuple(shape)))
    except ValueError as exc:
        raise DimensionError(f"cannot expand {t.shape} to {tuple(shape)}") from exc


class Rng:
    """Seeded random streams on numpy's counter-based Philox-4x64 generator.

    ``stream(name)`` derives an independent generator keyed by a BLAKE2b digest
    of ``(seed, name)``; streams with different names never share state, so a new
    consumer never shifts the values an existing one sees.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._generator = np.random.Generator(np.random.Philox(key=self._key("root")))

    def _key(self, name: str) -> int:
        digest = hashlib.blake2b(
            f"{self.seed}:{name}".encode("utf-8"), digest_size=16
        ).digest()
        return int.from_bytes(digest, "little")

    def stream(self, name: str) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self._key(name)))

    def child(self, name: str) -> "Rng":
        """A new ``Rng`` whose seed is derived from this one and ``name``."""
        return Rng(self._key(name) & 0xFFFFFFFFFFFFFFFF)

    def normal(self, shape: Tuple[int, ...], dtype=np.float64, scale: float = 1.0) -> Tensor:
        values = self._generator.standard_normal(size=shape) * scale
        return as_tensor(values, dtype)

    def uniform(
        self, shape: Tuple[int, ...], low: float = 0.0, high: float = 1.0, dtype=np.float64
    ) -> Tensor:
        return as_tensor(self._generator.uniform(low, high, size=shape), dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def integers(self, low: int, high: int, size: Optional[Tuple[int, ...]] = None) -> np.ndarray:
        return self._generator.integers(low, high, size=size)
