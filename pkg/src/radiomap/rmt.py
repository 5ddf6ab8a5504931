"""Reader/writer for the portable ``RMT1`` tensor file.

Layout: magic ``b"RMT1"``, one dtype byte (1 = float32, 2 = float64), one
rank byte ``r``, ``r`` little-endian uint32 dimensions, then the row-major
little-endian payload.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"RMT1"
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class RMTError(ValueError):
    """Raised for malformed or inconsistent RMT1 content."""


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _DTYPE_TO_CODE:
        arr = arr.astype(np.float64)
    code = _DTYPE_TO_CODE[arr.dtype]
    if arr.ndim > 255:
        raise RMTError(f"rank {arr.ndim} does not fit in one byte")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes(order="C")
    return header + payload


def decode(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise RMTError(f"{source}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _CODES:
        raise RMTError(f"{source}: unknown dtype code {code}")
    offset = 6 + 4 * rank
    if len(blob) < offset:
        raise RMTError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", blob, 6)
    dtype = _CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise RMTError(
            f"{source}: payload has {len(blob) - offset} bytes, shape {shape} "
            f"needs {expected}"
        )
    out = np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape)
    return out.astype(dtype.newbyteorder("="), copy=True)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    return decode(path.read_bytes(), source=str(path))
