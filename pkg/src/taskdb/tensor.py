"""Shape-annotated flat tensors (``Mvec``) and their binary frame.

Frame layout, all integers little-endian::

    b"MVEC" | version:u8 | rank:u32 | dims:u64 * rank | data:f64le * prod(dims)
"""

from __future__ import annotations

import math
import struct
from typing import Iterable, Sequence

import numpy as np

from taskdb.errors import CorruptFrame, EmptyShape, OutOfBounds, RankMismatch, ShapeMismatch

MAGIC = b"MVEC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBI")
_DIM = struct.Struct("<Q")


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise EmptyShape("shape must have at least one dimension")
    for d in dims:
        if d < 1:
            raise ShapeMismatch(f"dimension sizes must be >= 1, got {list(dims)}")
    return dims


def strides(shape: Sequence[int]) -> list[int]:
    """Row-major element strides: ``strides[i] == prod(shape[i+1:])``."""
    dims = _check_shape(shape)
    out = [1] * len(dims)
    for i in range(len(dims) - 2, -1, -1):
        out[i] = out[i + 1] * dims[i + 1]
    return out


class Mvec:
    """Immutable row-major float64 tensor with an explicit shape."""

    __slots__ = ("_shape", "_data")

    def __init__(self, shape: Sequence[int], data: Iterable[float] | np.ndarray):
        dims = _check_shape(shape)
        arr = np.array(data, dtype=np.float64).reshape(-1)
        if math.prod(dims) != arr.size:
            raise ShapeMismatch(f"shape {list(dims)} holds {math.prod(dims)} elements, data has {arr.size}")
        arr.flags.writeable = False
        self._shape = dims
        self._data = arr

    @classmethod
    def from_array(cls, array: np.ndarray) -> "Mvec":
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        return cls(array.shape, np.ascontiguousarray(array).reshape(-1))

    @property
    def shape(self) -> tuple[int, ...]:
        return self._shape

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def rank(self) -> int:
        return len(self._shape)

    @property
    def size(self) -> int:
        return self._data.size

    def __len__(self) -> int:
        return self._data.size

    def to_array(self) -> np.ndarray:
        return self._data.reshape(self._shape)

    def __eq__(self, other) -> bool:
        # bitwise equality, so NaN payloads compare equal to themselves
        if not isinstance(other, Mvec):
            return NotImplemented
        return self._shape == other._shape and self._data.tobytes() == other._data.tobytes()

    def __hash__(self) -> int:
        return hash((self._shape, self._data.tobytes()))

    def __repr__(self) -> str:
        if self.size <= 8:
            return f"Mvec(shape={list(self._shape)}, data={self._data.tolist()})"
        return f"Mvec(shape={list(self._shape)}, size={self.size})"


def mvec_new(shape: Sequence[int], data: Iterable[float]) -> Mvec:
    return Mvec(shape, data)


def mvec_index(t: Mvec, coords: Sequence[int]) -> float:
    if len(coords) != t.rank:
        raise RankMismatch(f"expected {t.rank} coordinates, got {len(coords)}")
    flat = 0
    for axis, (c, d, s) in enumerate(zip(coords, t.shape, strides(t.shape))):
        if not 0 <= c < d:
            raise OutOfBounds(f"coordinate {c} out of range for axis {axis} of size {d}")
        flat += c * s
    return float(t.data[flat])


def mvec_reshape(t: Mvec, new_shape: Sequence[int]) -> Mvec:
    dims = _check_shape(new_shape)
    if math.prod(dims) != t.size:
        raise ShapeMismatch(f"cannot reshape {list(t.shape)} into {list(dims)}")
    return Mvec(dims, t.data)


def mvec_serialize(t: Mvec) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, t.rank)]
    parts.extend(_DIM.pack(d) for d in t.shape)
    parts.append(t.data.astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def read_frame(buf: bytes | memoryview, offset: int = 0) -> tuple[Mvec, int]:
    """Decode one frame starting at ``offset``; returns the tensor and the end offset."""
    view = memoryview(buf)
    if len(view) - offset < _HEADER.size:
        raise CorruptFrame("truncated header")
    magic, version, rank = _HEADER.unpack_from(view, offset)
    if magic != MAGIC:
        raise CorruptFrame(f"bad magic {bytes(magic)!r}")
    if version != FORMAT_VERSION:
        raise CorruptFrame(f"unsupported format version {version}")
    if rank == 0:
        raise CorruptFrame("frame declares rank 0")
    pos = offset + _HEADER.size
    if len(view) - pos < rank * _DIM.size:
        raise CorruptFrame("truncated shape")
    dims = [_DIM.unpack_from(view, pos + i * _DIM.size)[0] for i in range(rank)]
    pos += rank * _DIM.size
    if any(d == 0 for d in dims):
        raise CorruptFrame(f"frame declares a zero dimension: {dims}")
    count = math.prod(dims)
    nbytes = count * 8
    if len(view) - pos < nbytes:
        raise CorruptFrame(f"frame declares {count} elements but carries {(len(view) - pos) // 8}")
    data = np.frombuffer(view[pos:pos + nbytes], dtype="<f8").astype(np.float64)
    return Mvec(dims, data), pos + nbytes


def mvec_deserialize(buf: bytes) -> Mvec:
    t, end = read_frame(buf)
    if end != len(buf):
        raise CorruptFrame(f"{len(buf) - end} trailing bytes after frame")
    return t


def read_frames(buf: bytes) -> list[Mvec]:
    """Decode a back-to-back sequence of frames."""
    out, pos = [], 0
    while pos < len(buf):
        t, pos = read_frame(buf, pos)
        out.append(t)
    return out
