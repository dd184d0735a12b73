"""Bit-exact binary checkpoint format.

Layout: magic "MTGN"; format version (u32 LE) = 1; tensor count (u32 LE);
then per tensor: name length (u32 LE) + UTF-8 name, dtype code (u8; 1 =
float32, 2 = float64), rank (u8), extents (u64 LE each), raw little-endian
element bytes in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTGN"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors atomically (temp file + rename), preserving dict order."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"checkpoint: unsupported dtype {arr.dtype} for {name}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, rank = struct.unpack_from("<BB", data, offset)
        offset += 2
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = struct.unpack_from(f"<{rank}Q", data, offset) if rank else ()
        offset += 8 * rank
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        arr = np.frombuffer(data[offset:offset + nbytes], dtype=dtype).reshape(shape)
        offset += nbytes
        tensors[name] = arr.copy()
    return tensors


def is_checkpoint(path: str | Path) -> bool:
    p = Path(path)
    if not p.is_file():
        return False
    with open(p, "rb") as fh:
        return fh.read(4) == MAGIC
