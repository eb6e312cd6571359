"""Binary checkpoint container.

Layout::

    b"SNWS" | version: uint32 LE | header length: uint64 LE | header (UTF-8 JSON) | blobs

The header lists every tensor (name, shape, dtype, offset, nbytes, optional mask
kind) in blob order; offsets are relative to the first blob byte. Blobs are raw
little-endian IEEE-754 scalars. Masks ride along as tensors named
``mask:<weight>`` holding 0.0/1.0 in the weights' dtype.
"""

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from snows import tensor as T
from snows.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"SNWS"
VERSION = 1
MASK_PREFIX = "mask:"
_PREAMBLE = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    mask_kinds: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    manifest_hash: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def weights(self) -> Dict[str, np.ndarray]:
        return {n: t for n, t in self.tensors.items() if not n.startswith(MASK_PREFIX)}

    def masks(self) -> Dict[str, np.ndarray]:
        return {
            n[len(MASK_PREFIX):]: t for n, t in self.tensors.items() if n.startswith(MASK_PREFIX)
        }


def encode(ckpt: Checkpoint) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, value in ckpt.tensors.items():
        array = T.as_tensor(value)
        data = array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        entry = {
            "name": name,
            "shape": list(array.shape),
            "dtype": str(array.dtype),
            "offset": offset,
            "nbytes": len(data),
        }
        if name.startswith(MASK_PREFIX):
            kind = ckpt.mask_kinds.get(name[len(MASK_PREFIX):])
            if kind is not None:
                entry["mask_kind"] = kind
        entries.append(entry)
        blobs.append(data)
        offset += len(data)
    header = {
        "format": "snows-checkpoint",
        "manifest_hash": ckpt.manifest_hash,
        "metadata": ckpt.metadata,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + b"".join(blobs)


def _directory_entry(entry: Any, source: str):
    try:
        name = str(entry["name"])
        stored = np.dtype(entry["dtype"])
        shape = tuple(int(s) for s in entry["shape"])
        int(entry["offset"]), int(entry["nbytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{source}: malformed tensor directory entry {entry!r}: {exc}") from exc
    if stored.kind != "f":
        raise CheckpointError(f"{source}: tensor {name!r} has unsupported dtype {stored}")
    return name, stored, shape


def decode(
    payload: bytes, dtype=None, manifest_hash: Optional[str] = None, source: str = "<bytes>"
) -> Checkpoint:
    if len(payload) < _PREAMBLE.size:
        raise CheckpointError(f"{source}: truncated preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(payload)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}, expected {VERSION}")
    start = _PREAMBLE.size
    if len(payload) < start + header_len:
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(payload[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise CheckpointError(f"{source}: header has no tensor directory")
    if manifest_hash is not None and header.get("manifest_hash") != manifest_hash:
        raise CheckpointError(
            f"{source}: manifest hash {header.get('manifest_hash')} does not match {manifest_hash}"
        )
    expected = None if dtype is None else T.resolve_dtype(dtype)
    blob_start = start + header_len
    ckpt = Checkpoint(manifest_hash=header.get("manifest_hash"), metadata=header.get("metadata", {}))
    cursor = 0
    for entry in header["tensors"]:
        name, stored, shape = _directory_entry(entry, source)
        if expected is not None and stored != expected:
            raise CheckpointError(f"{source}: tensor {name!r} is {stored}, expected {expected}")
        if entry["offset"] != cursor:
            raise CheckpointError(f"{source}: tensor {name!r} offset {entry['offset']} != {cursor}")
        begin = blob_start + entry["offset"]
        end = begin + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{source}: truncated blob for tensor {name!r}")
        if int(np.prod(shape)) * stored.itemsize != entry["nbytes"]:
            raise CheckpointError(f"{source}: tensor {name!r} size does not match shape {shape}")
        array = np.frombuffer(payload[begin:end], dtype=stored.newbyteorder("<")).reshape(shape)
        ckpt.tensors[name] = np.ascontiguousarray(array.astype(stored))
        if "mask_kind" in entry:
            ckpt.mask_kinds[name[len(MASK_PREFIX):]] = entry["mask_kind"]
        cursor = entry["offset"] + entry["nbytes"]
    return ckpt


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    payload = encode(ckpt)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug("wrote checkpoint %s (%d tensors, %d bytes)", path, len(ckpt.tensors), len(payload))


def load_checkpoint(
    path: Union[str, Path], dtype=None, manifest_hash: Optional[str] = None
) -> Checkpoint:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(payload, dtype=dtype, manifest_hash=manifest_hash, source=str(path))


def from_weights(
    weights: Mapping[str, np.ndarray],
    masks: Optional[Mapping[str, "object"]] = None,
    manifest_hash: Optional[str] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    """Build a checkpoint from a weight store and optional ``Mask`` objects."""
    tensors = {name: np.asarray(weights[name]) for name in sorted(weights)}
    kinds = {}
    for name in sorted(masks or {}):
        mask = masks[name]
        dtype = tensors[name].dtype if name in tensors else np.float64
        tensors[MASK_PREFIX + name] = mask.pattern.astype(dtype)
        kinds[name] = mask.kind.to_dict()
    return Checkpoint(tensors, kinds, manifest_hash, dict(metadata or {}))
