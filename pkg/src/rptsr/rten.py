"""RTEN raw tensor files: ``RTEN`` | u8 version | u8 dtype | u8 rank | u64 extents | payload.

All multi-byte fields are little-endian; payload is row-major.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTEN"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class RtenError(ValueError):
    pass


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise RtenError(f"unsupported dtype {arr.dtype}")
    head = MAGIC + struct.pack("<BBB", VERSION, tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    arr, used = read_from(buf, 0)
    if used != len(buf):
        raise RtenError(f"{len(buf) - used} trailing bytes after RTEN payload")
    return arr


def read_from(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    """Decode one RTEN record starting at ``offset``; return (array, end offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise RtenError("bad RTEN magic")
    if len(buf) < offset + 7:
        raise RtenError("truncated RTEN header")
    version, tag, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise RtenError(f"unsupported RTEN version {version}")
    if tag not in _DTYPES:
        raise RtenError(f"unknown RTEN dtype tag {tag}")
    pos = offset + 7
    if len(buf) < pos + 8 * rank:
        raise RtenError("truncated RTEN extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = _DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise RtenError("truncated RTEN payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path: str | Path) -> np.ndarray:
    return loads(Path(path).read_bytes())
