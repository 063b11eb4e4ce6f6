"""FILT binary tensor checkpoints.

Layout, all little-endian::

    b"FILT"  u32 version  u32 tensor_count
    per tensor:
        u32 name_len  name (UTF-8)
        u8 dtype (1 = float32, 2 = float64)
        u32 ndim  u64 dims[ndim]
        row-major payload

Scalars are stored as 1-element tensors.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FILT"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype not in DTYPE_CODES:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        code = DTYPE_CODES[arr.dtype]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic, not a FILT file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported FILT version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BI", take(5))
        if code not in DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(bytes(take(size * dt.itemsize)), dtype=dt).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def write(path: str | Path, tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors))
    return path


def read(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def scalar(tensors: Mapping[str, np.ndarray], name: str) -> float:
    try:
        arr = tensors[name]
    except KeyError:
        raise CheckpointError(f"checkpoint has no tensor {name!r}") from None
    if arr.size != 1:
        raise CheckpointError(f"tensor {name!r} is not a scalar")
    return float(arr.reshape(-1)[0])
