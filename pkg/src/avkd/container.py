"""Binary tensor container shared by corpora, teacher banks, codebooks,
checkpoints and probe exports.

Layout (all little-endian)::

    b"AVKD" | version:u16 | num_tensors:u16 |
    repeat num_tensors: rows:u32 | cols:u32 | rows*cols float64 row-major

Only 2-D tensors are stored; callers reshape 1-D vectors to ``(1, n)``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVKD"
VERSION = 1

_HEADER = struct.Struct("<4sHH")
_SHAPE = struct.Struct("<II")


class ContainerError(ValueError):
    """Base class for unreadable container files."""


class MalformedHeaderError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


def encode(tensors) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(tensors))]
    for t in tensors:
        a = np.asarray(t, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise ValueError(f"only 1-D/2-D tensors can be stored, got shape {a.shape}")
        parts.append(_SHAPE.pack(*a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> list[np.ndarray]:
    if len(buf) < _HEADER.size:
        raise MalformedHeaderError("file shorter than the container header")
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"unsupported container version {version}")
    offset = _HEADER.size
    out = []
    for i in range(count):
        if offset + _SHAPE.size > len(buf):
            raise TruncatedFileError(f"tensor {i}: shape record cut off")
        rows, cols = _SHAPE.unpack_from(buf, offset)
        offset += _SHAPE.size
        nbytes = rows * cols * 8
        if offset + nbytes > len(buf):
            raise TruncatedFileError(
                f"tensor {i}: header promises {rows}x{cols} values, "
                f"only {(len(buf) - offset) // 8} present"
            )
        a = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset)
        out.append(a.reshape(rows, cols).astype(np.float64))
        offset += nbytes
    if offset != len(buf):
        raise ShapeMismatchError(f"{len(buf) - offset} trailing bytes after last tensor")
    return out


def write_tensors(path, tensors) -> None:
    path = Path(path)
    data = encode(tensors)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_tensors(path) -> list[np.ndarray]:
    return decode(Path(path).read_bytes())
