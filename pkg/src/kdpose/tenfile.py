"""Reader/writer for the TEN1 binary tensor format.

Layout: ``b"TEN1"``, u8 dtype code (1 = float32, 2 = float64), u8 rank,
rank x u64 little-endian dims, then the raw little-endian row-major payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TEN1"
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _BY_DTYPE.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise TensorFormatError(f"{source}: missing TEN1 magic")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise TensorFormatError(f"{source}: unknown dtype code {code}")
    off = 6 + 8 * rank
    if len(buf) < off:
        raise TensorFormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 6)
    dt = _CODES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != need:
        raise TensorFormatError(f"{source}: payload is {len(buf) - off} bytes, expected {need}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))
