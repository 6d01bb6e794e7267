"""FTNSR1 binary tensor files.

Layout: the 6 magic bytes ``FTNSR1``, a little-endian u32 rank, ``rank``
little-endian u32 extents, then the row-major little-endian f64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"FTNSR1"


class FormatError(ValueError):
    pass


def dumps(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if buf[:6] != MAGIC:
        raise FormatError(f"bad magic {buf[:6]!r}, expected {MAGIC!r}")
    if len(buf) < 10:
        raise FormatError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, 6)
    off = 10 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}I", buf, 10)
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 8 * n:
        raise FormatError(f"payload is {len(buf) - off} bytes, shape {shape} needs {8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)


def save(path: Union[str, Path], arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path: Union[str, Path]) -> np.ndarray:
    return loads(Path(path).read_bytes())


def write(fh: BinaryIO, arr) -> None:
    fh.write(dumps(arr))
