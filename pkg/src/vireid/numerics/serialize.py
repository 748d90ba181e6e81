"""Tensor blob format: u32 rank, u32 dims..., then little-endian float64 data."""
import struct

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(blob: bytes, offset: int = 0):
    """Decode one tensor starting at ``offset``; returns (ndarray, next offset)."""
    if len(blob) - offset < 4:
        raise ContractError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    shape = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + 8 * count
    if end > len(blob):
        raise ContractError("truncated tensor data")
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
    return arr, end


def write_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = tensor_from_bytes(fh.read())
    return arr
