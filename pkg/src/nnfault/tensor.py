"""Injectable value representations and their bit-level views.

Three 32-bit representations can be faulted:

* :class:`DenseTensor` -- IEEE-754 single precision, row-major.
* :class:`QuantTensor` -- signed 32-bit fixed point with a fixed scale of 2**24,
  so the representable range is [-128, 128) with a step of 2**-24.
* :class:`SparseTensor` -- coordinate (COO) format: an ``nnz x rank`` array of
  uint32 coordinates plus ``nnz`` float32 values.

All three are immutable; their arrays are flagged read-only on construction.

Binary container (all integers little-endian)::

    magic   4 bytes  b"FLT1"
    tag     u64      0 = f32, 1 = i32, 2 = coo
    rank    u64
    dims    u64 * rank
    -- tag 0/1 --
    data    prod(dims) * 4 bytes
    -- tag 2 --
    nnz     u64
    indices nnz * rank * u32
    values  nnz * f32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import RangeExceeded, ShapeMismatch

QUANT_SHIFT = 24
QUANT_SCALE = float(1 << QUANT_SHIFT)
QUANT_LIMIT = 128.0

MAGIC = b"FLT1"
TAG_F32, TAG_I32, TAG_COO = 0, 1, 2


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeMismatch(f"dimension sizes must be positive, got {shape}")
    return shape


@dataclass(frozen=True, eq=False)
class DenseTensor:
    data: np.ndarray

    def __init__(self, data):
        a = np.asarray(data)
        if a.dtype != np.float32:
            a = a.astype(np.float32)
        _check_shape(a.shape)
        object.__setattr__(self, "data", _frozen(a))

    @classmethod
    def from_flat(cls, shape, flat) -> DenseTensor:
        shape = _check_shape(shape)
        flat = np.asarray(flat, dtype=np.float32).ravel()
        if flat.size != int(np.prod(shape)):
            raise ShapeMismatch(f"{flat.size} values do not fill shape {shape}")
        return cls(flat.reshape(shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def bits(self) -> np.ndarray:
        return to_bits(self.data)

    def bit_equal(self, other: DenseTensor) -> bool:
        return self.shape == other.shape and np.array_equal(self.bits(), other.bits())


@dataclass(frozen=True, eq=False)
class QuantTensor:
    data: np.ndarray
    scale: float = QUANT_SCALE

    def __init__(self, data):
        a = np.asarray(data)
        if a.dtype != np.int32:
            raise TypeError(f"quantized codes must be int32, got {a.dtype}")
        _check_shape(a.shape)
        object.__setattr__(self, "data", _frozen(a))
        object.__setattr__(self, "scale", QUANT_SCALE)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class SparseTensor:
    dense_shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray

    def __init__(self, dense_shape, indices, values):
        dense_shape = _check_shape(dense_shape)
        idx = np.asarray(indices, dtype=np.uint32).reshape(-1, len(dense_shape))
        val = np.asarray(values, dtype=np.float32).ravel()
        if idx.shape[0] != val.shape[0]:
            raise ShapeMismatch(f"{idx.shape[0]} coordinates but {val.shape[0]} values")
        object.__setattr__(self, "dense_shape", dense_shape)
        object.__setattr__(self, "indices", _frozen(idx))
        object.__setattr__(self, "values", _frozen(val))

    @property
    def nnz(self) -> int:
        return self.values.shape[0]


Tensor = Union[DenseTensor, QuantTensor, SparseTensor]


def to_bits(x) -> np.ndarray:
    """Reinterpret float32 data as uint32 bit patterns (no numeric conversion)."""
    a = np.asarray(x)
    if a.dtype != np.float32:
        a = a.astype(np.float32)
    return np.ascontiguousarray(a).view(np.uint32)


def from_bits(b) -> np.ndarray:
    a = np.asarray(b)
    if a.dtype != np.uint32:
        a = a.astype(np.uint32)
    return np.ascontiguousarray(a).view(np.float32)


def quantize(t: DenseTensor, *, saturate: bool = False) -> QuantTensor:
    """Round-to-nearest-even of ``x * 2**24`` into int32.

    Elements with ``|x| >= 128`` (or NaN) raise :class:`RangeExceeded` unless
    ``saturate`` is set, in which case they clamp to the int32 limits and NaN
    maps to 0. The injector uses the saturating form so that faulted upstream
    values never abort an experiment.
    """
    x = t.data.astype(np.float64)
    if saturate:
        scaled = np.nan_to_num(np.rint(x * QUANT_SCALE), nan=0.0)
        codes = np.clip(scaled, -(2.0**31), 2.0**31 - 1)
    else:
        bad = ~(np.abs(x) < QUANT_LIMIT)
        if bad.any():
            i = int(np.flatnonzero(bad.ravel())[0])
            raise RangeExceeded(i, float(x.ravel()[i]))
        codes = np.rint(x * QUANT_SCALE)
    return QuantTensor(codes.astype(np.int32))


def dequantize(q: QuantTensor) -> DenseTensor:
    # int32 / 2**24 is exact in float64; the float32 cast is the only rounding.
    return DenseTensor((q.data.astype(np.float64) / QUANT_SCALE).astype(np.float32))


def to_coo(t: DenseTensor) -> SparseTensor:
    """Nonzero entries in row-major order.

    "Nonzero" means a nonzero bit pattern, so ``-0.0`` and NaN are kept and the
    round trip through :func:`from_coo` is bitwise exact.
    """
    coords = np.nonzero(t.bits())
    return SparseTensor(t.shape, np.stack(coords, axis=1), t.data[coords])


def from_coo(s: SparseTensor) -> DenseTensor:
    """Scatter into zeros, wrapping out-of-range coordinates; later entries win."""
    shape = np.asarray(s.dense_shape, dtype=np.int64)
    out = np.zeros(int(np.prod(shape)), dtype=np.float32)
    if s.nnz:
        coords = s.indices.astype(np.int64) % shape
        flat = np.ravel_multi_index(coords.T, s.dense_shape)
        # keep the last occurrence of each flat index
        rev_unique, rev_pos = np.unique(flat[::-1], return_index=True)
        last = s.nnz - 1 - rev_pos
        out[rev_unique] = s.values[last]
    return DenseTensor(out.reshape(s.dense_shape))


# -- binary container -------------------------------------------------------


def dumps(t: Tensor) -> bytes:
    if isinstance(t, DenseTensor):
        tag, shape = TAG_F32, t.shape
    elif isinstance(t, QuantTensor):
        tag, shape = TAG_I32, t.shape
    elif isinstance(t, SparseTensor):
        tag, shape = TAG_COO, t.dense_shape
    else:
        raise TypeError(f"cannot serialize {type(t).__name__}")
    parts = [MAGIC, struct.pack(f"<QQ{len(shape)}Q", tag, len(shape), *shape)]
    if tag == TAG_F32:
        parts.append(t.data.astype("<f4").tobytes())
    elif tag == TAG_I32:
        parts.append(t.data.astype("<i4").tobytes())
    else:
        parts.append(struct.pack("<Q", t.nnz))
        parts.append(t.indices.astype("<u4").tobytes())
        parts.append(t.values.astype("<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError("not a tensor container (bad magic)")
    tag, rank = struct.unpack_from("<QQ", buf, 4)
    off = 20
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    if tag in (TAG_F32, TAG_I32):
        n = int(np.prod(shape))
        dtype = "<f4" if tag == TAG_F32 else "<i4"
        data = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(shape)
        if tag == TAG_F32:
            return DenseTensor(data.astype(np.float32))
        return QuantTensor(data.astype(np.int32))
    if tag == TAG_COO:
        (nnz,) = struct.unpack_from("<Q", buf, off)
        off += 8
        idx = np.frombuffer(buf, dtype="<u4", count=nnz * rank, offset=off)
        off += 4 * nnz * rank
        val = np.frombuffer(buf, dtype="<f4", count=nnz, offset=off)
        return SparseTensor(shape, idx.reshape(nnz, rank), val)
    raise ValueError(f"unknown tensor tag {tag}")


def save(path: str | Path, t: Tensor) -> None:
    Path(path).write_bytes(dumps(t))


def load(path: str | Path) -> Tensor:
    return loads(Path(path).read_bytes())
