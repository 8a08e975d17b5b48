"""Fault and monitor descriptions, rate-based sampling, and mask compilation.

A set of faults on one tensor compiles into a :class:`FaultMask`: three uint32
arrays of the tensor's shape, applied in one vectorized pass as::

    y = ((x & and_mask) | or_mask) ^ xor_mask

Stuck-at faults therefore act first and bit flips act on the stuck value.
Two stuck-at faults forcing the same bit of the same element to different
values are rejected at build time.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConflictingStuckAt, IndexOutOfRange, InvalidFault, ShapeMismatch
from .rng import SplitMix64

ALL_ONES = np.uint32(0xFFFFFFFF)


class FaultKind(str, enum.Enum):
    BIT_FLIP = "bit_flip"
    STUCK_AT_ZERO = "stuck_at_zero"
    STUCK_AT_ONE = "stuck_at_one"


class TargetType(str, enum.Enum):
    WEIGHT = "weight"
    OUTPUT = "output"


class SiteType(str, enum.Enum):
    DENSE_FLOAT = "dense_float"
    QUANTIZED_INT = "quantized_int"
    SPARSE_INDEX = "sparse_index"


class CaptureMode(str, enum.Enum):
    FULL_TENSOR = "full_tensor"
    SUMMARY = "summary"


_KIND_CODE = {FaultKind.BIT_FLIP: 0, FaultKind.STUCK_AT_ZERO: 1, FaultKind.STUCK_AT_ONE: 2}


@dataclass(frozen=True)
class Fault:
    """One injection directive.

    ``element_indices`` are coordinates in the target array: the per-sample
    output shape for output faults, the weight shape for weight faults, and
    ``(entry_row, dim_column)`` into the worst-case COO index buffer for
    sparse-index faults. ``bit_positions[i]`` lists the bits hit in element ``i``.
    """

    layer_name: str
    target: TargetType
    site: SiteType
    element_indices: tuple[tuple[int, ...], ...]
    bit_positions: tuple[tuple[int, ...], ...]
    kind: FaultKind = FaultKind.BIT_FLIP

    def __post_init__(self):
        object.__setattr__(self, "target", TargetType(self.target))
        object.__setattr__(self, "site", SiteType(self.site))
        object.__setattr__(self, "kind", FaultKind(self.kind))
        elems = tuple(tuple(int(c) for c in e) for e in self.element_indices)
        bits = tuple(tuple(int(b) for b in bl) for bl in self.bit_positions)
        object.__setattr__(self, "element_indices", elems)
        object.__setattr__(self, "bit_positions", bits)
        if not elems:
            raise InvalidFault("a fault needs at least one element")
        if len(bits) != len(elems):
            raise InvalidFault(f"{len(elems)} elements but {len(bits)} bit lists")
        for bl in bits:
            if not bl or any(b < 0 or b > 31 for b in bl):
                raise InvalidFault(f"bit positions must be non-empty and within [0, 31], got {bl}")
        if self.target is TargetType.WEIGHT and self.site is not SiteType.DENSE_FLOAT:
            raise InvalidFault(f"{self.site.value} sites exist only for output targets")

    @property
    def key(self) -> tuple[str, TargetType, SiteType]:
        return (self.layer_name, self.target, self.site)


@dataclass(frozen=True, eq=False)
class FaultArray:
    """Many single-bit faults on one target tensor, as parallel arrays.

    Equivalent to one :class:`Fault` per entry but cheap to build and to
    compile for large counts. ``flat_index`` indexes the flattened target.
    """

    layer_name: str
    target: TargetType
    site: SiteType
    flat_index: np.ndarray
    bit_positions: np.ndarray
    kind: FaultKind = FaultKind.BIT_FLIP

    def __post_init__(self):
        object.__setattr__(self, "target", TargetType(self.target))
        object.__setattr__(self, "site", SiteType(self.site))
        object.__setattr__(self, "kind", FaultKind(self.kind))
        flat = np.asarray(self.flat_index, dtype=np.int64).ravel()
        bits = np.asarray(self.bit_positions, dtype=np.int64).ravel()
        if flat.shape != bits.shape:
            raise InvalidFault(f"{flat.size} elements but {bits.size} bit positions")
        if bits.size and (bits.min() < 0 or bits.max() > 31):
            raise InvalidFault("bit positions must lie within [0, 31]")
        if self.target is TargetType.WEIGHT and self.site is not SiteType.DENSE_FLOAT:
            raise InvalidFault(f"{self.site.value} sites exist only for output targets")
        object.__setattr__(self, "flat_index", flat)
        object.__setattr__(self, "bit_positions", bits)

    def __len__(self) -> int:
        return len(self.flat_index)

    @property
    def key(self) -> tuple[str, TargetType, SiteType]:
        return (self.layer_name, self.target, self.site)

    def to_faults(self, shape) -> list[Fault]:
        coords = np.stack(np.unravel_index(self.flat_index, tuple(shape)), axis=1)
        return [Fault(self.layer_name, self.target, self.site, (tuple(c),), ((int(b),),), self.kind)
                for c, b in zip(coords, self.bit_positions)]


@dataclass(frozen=True)
class Monitor:
    layer_name: str
    target: TargetType = TargetType.OUTPUT
    capture: CaptureMode = CaptureMode.SUMMARY

    def __post_init__(self):
        object.__setattr__(self, "target", TargetType(self.target))
        object.__setattr__(self, "capture", CaptureMode(self.capture))


@dataclass(frozen=True, eq=False)
class FaultMask:
    shape: tuple[int, ...]
    and_mask: np.ndarray
    or_mask: np.ndarray
    xor_mask: np.ndarray
    n_faults: int = field(default=0)

    @classmethod
    def neutral(cls, shape) -> FaultMask:
        shape = tuple(int(s) for s in shape)
        return cls(
            shape,
            np.full(shape, ALL_ONES, dtype=np.uint32),
            np.zeros(shape, dtype=np.uint32),
            np.zeros(shape, dtype=np.uint32),
        )

    def is_neutral(self) -> bool:
        return (
            bool(np.all(self.and_mask == ALL_ONES))
            and not self.or_mask.any()
            and not self.xor_mask.any()
        )


def fault_count(rate: float, n_params: int) -> int:
    """Number of faults for ``rate`` over ``n_params`` targets (round half to even)."""
    return int(round(rate * n_params))


def build_mask(shape, flat_index, bits, kinds) -> FaultMask:
    """Vectorized mask construction from parallel arrays.

    ``kinds`` holds 0 (flip), 1 (stuck-at-0) or 2 (stuck-at-1) per entry.
    """
    shape = tuple(int(s) for s in shape)
    size = int(np.prod(shape))
    flat_index = np.asarray(flat_index, dtype=np.int64)
    bits = np.asarray(bits, dtype=np.uint32)
    kinds = np.asarray(kinds, dtype=np.int8)
    if flat_index.size and (flat_index.min() < 0 or flat_index.max() >= size):
        raise IndexOutOfRange(f"element index outside target of shape {shape}")
    if bits.size and bits.max() > 31:
        raise InvalidFault("bit position above 31")
    onehot = np.left_shift(np.uint32(1), bits)
    xor = np.zeros(size, dtype=np.uint32)
    set1 = np.zeros(size, dtype=np.uint32)
    clear = np.zeros(size, dtype=np.uint32)
    sel = kinds == 0
    np.bitwise_xor.at(xor, flat_index[sel], onehot[sel])
    sel = kinds == 2
    np.bitwise_or.at(set1, flat_index[sel], onehot[sel])
    sel = kinds == 1
    np.bitwise_or.at(clear, flat_index[sel], onehot[sel])
    conflict = set1 & clear
    if conflict.any():
        e = int(np.flatnonzero(conflict)[0])
        raise ConflictingStuckAt(
            f"element {e} has bits {int(conflict[e]):#010x} stuck at both 0 and 1"
        )
    return FaultMask(
        shape,
        (~clear).reshape(shape),
        set1.reshape(shape),
        xor.reshape(shape),
        int(flat_index.size),
    )


def flatten_faults(faults, shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Expand faults into parallel (flat element index, bit, kind code) arrays.

    :class:`FaultArray` entries come first, in order, then :class:`Fault` entries.
    """
    faults = list(faults)
    arrays = [f for f in faults if isinstance(f, FaultArray)]
    faults = [f for f in faults if not isinstance(f, FaultArray)]
    flat0 = [f.flat_index for f in arrays]
    bits0 = [f.bit_positions.astype(np.uint32) for f in arrays]
    kinds0 = [np.full(len(f), _KIND_CODE[f.kind], dtype=np.int8) for f in arrays]
    size = int(np.prod(shape))
    for f in flat0:
        if f.size and (f.min() < 0 or f.max() >= size):
            raise IndexOutOfRange(f"element index outside target of shape {tuple(shape)}")
    flat1, bits1, kinds1 = _flatten_literal(faults, shape)
    return (np.concatenate(flat0 + [flat1]), np.concatenate(bits0 + [bits1]),
            np.concatenate(kinds0 + [kinds1]))


def _flatten_literal(faults, shape):
    coords: list[tuple[int, ...]] = []
    bits: list[int] = []
    kinds: list[int] = []
    rank = len(shape)
    for f in faults:
        code = _KIND_CODE[f.kind]
        for elem, bl in zip(f.element_indices, f.bit_positions):
            if len(elem) != rank:
                raise IndexOutOfRange(f"index {elem} has rank {len(elem)}, target shape is {tuple(shape)}")
            for b in bl:
                coords.append(elem)
                bits.append(b)
                kinds.append(code)
    if not coords:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.astype(np.uint32), empty.astype(np.int8)
    c = np.asarray(coords, dtype=np.int64).reshape(-1, rank)
    if (c < 0).any() or (c >= np.asarray(shape)).any():
        bad = c[np.flatnonzero(((c < 0) | (c >= np.asarray(shape))).any(axis=1))[0]]
        raise IndexOutOfRange(f"index {tuple(bad)} outside target of shape {tuple(shape)}")
    flat = np.ravel_multi_index(c.T, shape)
    return flat, np.asarray(bits, dtype=np.uint32), np.asarray(kinds, dtype=np.int8)


def make_mask(faults, shape) -> FaultMask:
    faults = list(faults)
    keys = {f.key for f in faults}
    if len(keys) > 1:
        raise InvalidFault(f"faults target several tensors: {sorted(str(k) for k in keys)}")
    return build_mask(shape, *flatten_faults(faults, shape))


def apply_mask(bits: np.ndarray, m: FaultMask) -> np.ndarray:
    """Apply ``m`` to uint32 patterns; extra leading axes (a batch) broadcast."""
    bits = np.asarray(bits)
    if bits.dtype != np.uint32:
        raise TypeError(f"expected uint32 bit patterns, got {bits.dtype}")
    n = len(m.shape)
    if bits.shape[bits.ndim - n:] != m.shape or bits.ndim < n:
        raise ShapeMismatch(f"bits of shape {bits.shape} vs mask of shape {m.shape}")
    out = np.bitwise_and(bits, m.and_mask)
    np.bitwise_or(out, m.or_mask, out=out)
    np.bitwise_xor(out, m.xor_mask, out=out)
    return out


def sample_fault_arrays(rate, shape, seed, bits=None) -> tuple[np.ndarray, np.ndarray]:
    """Draw distinct flat element indices and one bit per element.

    Element draws come first from ``SplitMix64(seed)``, then bit draws, so the
    element set for a given seed does not depend on ``bits``.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be within [0, 1], got {rate}")
    n = int(np.prod(shape))
    k = fault_count(rate, n)
    rng = SplitMix64(seed)
    flat = rng.sample_without_replacement(n, k)
    choices = np.arange(32) if bits is None else np.asarray(sorted(set(bits)), dtype=np.int64)
    if choices.size == 0 or choices.min() < 0 or choices.max() > 31:
        raise InvalidFault(f"bit choices must lie in [0, 31], got {bits}")
    picked = choices[rng.integers(len(choices), k)] if k else np.empty(0, dtype=np.int64)
    return flat, picked


def sample_faults(
    rate: float,
    n_params: int | None,
    shape,
    layer: str,
    target: TargetType,
    site: SiteType,
    kind: FaultKind,
    rng_seed: int,
    bits=None,
) -> list[Fault]:
    """``round(rate * n_params)`` single-bit faults on distinct, uniformly drawn elements."""
    fa = sample_fault_array(rate, n_params, shape, layer, target, site, kind, rng_seed, bits)
    return fa.to_faults(shape) if len(fa) else []


def sample_fault_array(rate, n_params, shape, layer, target, site, kind, rng_seed, bits=None) -> FaultArray:
    """Same draw as :func:`sample_faults`, kept as arrays."""
    shape = tuple(int(s) for s in shape)
    if n_params is not None and n_params != int(np.prod(shape)):
        raise ShapeMismatch(f"n_params={n_params} does not match shape {shape}")
    flat, picked = sample_fault_arrays(rate, shape, rng_seed, bits)
    return FaultArray(layer, target, site, flat, picked, kind)
