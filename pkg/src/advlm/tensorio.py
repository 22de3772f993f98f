"""Binary tensor files: magic "ADVT", u32 rank, u64 dims, f64 payload.

Everything is little-endian. Weight files and perturbation artifacts
concatenate several records in one stream.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADVT"


class TensorFormatError(ValueError):
    """Malformed or truncated ADVT stream."""


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(arr.astype("<f8").tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = []
    for _ in range(rank):
        (d,) = struct.unpack("<Q", fh.read(8))
        dims.append(d)
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise TensorFormatError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return arr.reshape(dims)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_tensors(path, arrays) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_tensors(path) -> list:
    out = []
    size = Path(path).stat().st_size
    with open(path, "rb") as fh:
        while fh.tell() < size:
            out.append(read_tensor(fh))
    return out
