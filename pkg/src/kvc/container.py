"""KVT1 tensor container: the on-disk format for weights and cache dumps.

Layout (all integers little-endian):
    magic "KVT1"
    u32 tensor count
    per tensor: u32 name length, UTF-8 name, u8 rank, rank x u64 extents,
                row-major float32 data
Tensors are written sorted by name so re-exports are byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"KVT1"


class ContainerError(Exception):
    """Base class for KVT1 container problems."""


class BadMagicError(ContainerError):
    """File does not start with the KVT1 magic bytes."""


class TruncatedFileError(ContainerError):
    """File ends before the declared tensors are complete."""


class MissingTensorError(ContainerError):
    """A tensor required by the model config is absent."""


class ExtentMismatchError(ContainerError):
    """A tensor's extents disagree with the model config."""


def write_kvt(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<Q", extent))
            f.write(arr.tobytes(order="C"))


def read_kvt(path) -> dict[str, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, got {data[:4]!r}")
    offset = 4

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise TruncatedFileError(f"{path}: truncated while reading {what}")
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        shape = tuple(
            struct.unpack("<Q", take(8, f"{name} extent"))[0] for _ in range(rank)
        )
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = take(4 * n_items, f"{name} data")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return tensors
