"""Binary checkpoint format.

Little-endian layout::

    b"FSEG"  u32 version  u32 count
    count x { u32 name_len, name (utf-8), u32 rank, rank x u32 extent, float32 data }

Trainable/non-trainable status is not stored; it is recovered from the layer
plan when the checkpoint is loaded into a model.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .io import atomic_write_bytes
from .weights import ModelWeights

MAGIC = b"FSEG"
VERSION = 1


def dumps(weights: ModelWeights) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name, arr in weights.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(data: bytes, trainable: set[str] | frozenset[str] | None = None) -> ModelWeights:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(view):
            raise CheckpointError("truncated checkpoint")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if pos + nbytes > len(view):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(view[pos:pos + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        pos += nbytes
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = arr
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return ModelWeights(tensors, trainable if trainable is not None else tensors.keys())


def save(path: str | Path, weights: ModelWeights) -> None:
    atomic_write_bytes(Path(path), dumps(weights))


def load(path: str | Path, trainable=None) -> ModelWeights:
    return loads(Path(path).read_bytes(), trainable)
