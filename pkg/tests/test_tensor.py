from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nnfault.errors import RangeExceeded
from nnfault.rng import SplitMix64
from nnfault.tensor import (
    QUANT_SCALE,
    DenseTensor,
    QuantTensor,
    SparseTensor,
    dequantize,
    dumps,
    from_bits,
    from_coo,
    load,
    loads,
    quantize,
    save,
    to_bits,
    to_coo,
)

from oracles import bits_f32, f32_bits, scatter

CORNERS = np.array(
    [0.0, -0.0, np.inf, -np.inf, np.nan, 1.0, -1.0, 1e-45, -1e-45, 3.4028235e38, 1.1754944e-38],
    dtype=np.float32,
)


def test_to_bits_examples():
    assert to_bits(np.float32(1.0)) == 0x3F800000
    assert to_bits(np.float32(0.0)) == 0
    assert to_bits(np.float32(-0.0)) == 0x80000000


def test_bit_round_trip_random_words():
    words = (SplitMix64(5).u64(1_000_000) & np.uint64(0xFFFFFFFF)).astype(np.uint32)
    assert np.array_equal(to_bits(from_bits(words)), words)


def test_bit_round_trip_corners_and_nan_payloads():
    payloads = np.array([0x7FC00000, 0x7F800001, 0xFFC00123, 0x7FBFFFFF], dtype=np.uint32)
    for b in (to_bits(CORNERS), payloads):
        assert np.array_equal(to_bits(from_bits(b)), b)


def test_bits_agree_with_struct():
    for x in (1.0, -2.5, 1e-30, 123.456):
        assert int(to_bits(np.float32(x))[0]) == f32_bits(x)
        assert from_bits(np.uint32(f32_bits(x)))[0] == np.float32(bits_f32(f32_bits(x)))


def test_quantize_examples():
    q = quantize(DenseTensor([1.0, 0.0, -0.5]))
    assert q.data.tolist() == [16777216, 0, -8388608]
    assert dequantize(QuantTensor(np.array([16777216], dtype=np.int32))).data[0] == 1.0


def test_quantize_rounds_half_to_even():
    # 2**-25 is exactly half a quantization step
    half = np.float32(2.0**-25)
    q = quantize(DenseTensor([half, 3 * half, -half]))
    assert q.data.tolist() == [0, 2, 0]


def test_dequantize_sign_bit_flip():
    code = np.array([16777216], dtype=np.int32).view(np.uint32) ^ np.uint32(0x80000000)
    code = code.view(np.int32)
    assert code[0] == -2130706432
    # 2130706432 == 127 * 2**24, so the faulted value is exactly -127
    assert dequantize(QuantTensor(code)).data[0] == -127.0


@pytest.mark.parametrize("bad", [128.0, -128.0, 1e6, np.nan, np.inf])
def test_quantize_range(bad):
    with pytest.raises(RangeExceeded) as e:
        quantize(DenseTensor([0.0, bad]))
    assert e.value.index == 1


def test_quantize_saturating():
    q = quantize(DenseTensor([1e9, -1e9, np.nan]), saturate=True)
    assert q.data.tolist() == [2**31 - 1, -(2**31), 0]


@given(hnp.arrays(np.float32, 64, elements=st.floats(-127.5, 127.5, width=32)))
@settings(max_examples=200)
def test_quantization_error_bound(x):
    y = dequantize(quantize(DenseTensor(x))).data.astype(np.float64)
    x64 = x.astype(np.float64)
    ulp = np.spacing(np.abs(x)).astype(np.float64)
    assert np.all(np.abs(y - x64) <= 2.0**-25 + ulp)


def test_quantization_step():
    assert 1 / QUANT_SCALE == pytest.approx(5.96e-8, rel=1e-3)


def test_to_coo_examples():
    s = to_coo(DenseTensor([[0, 5], [0, 0]]))
    assert s.indices.tolist() == [[0, 1]]
    assert s.values.tolist() == [5.0]
    empty = to_coo(DenseTensor(np.zeros((3, 2))))
    assert empty.nnz == 0 and empty.indices.shape == (0, 2)


def test_to_coo_row_major_order():
    t = DenseTensor(np.arange(1, 13, dtype=np.float32).reshape(3, 4))
    s = to_coo(t)
    assert s.values.tolist() == list(range(1, 13))


def test_from_coo_examples():
    d = from_coo(SparseTensor((2, 2), [[0, 1]], [5.0]))
    assert d.data.tolist() == [[0, 5], [0, 0]]
    wrapped = from_coo(SparseTensor((2, 2), [[0, 3]], [5.0]))
    assert wrapped.data.tolist() == [[0, 5], [0, 0]]
    dup = from_coo(SparseTensor((2, 2), [[0, 0], [0, 0]], [1.0, 2.0]))
    assert dup.data[0, 0] == 2.0


def test_coo_keeps_negative_zero_and_nan():
    t = DenseTensor(np.array([0.0, -0.0, np.nan, 2.0], dtype=np.float32))
    assert from_coo(to_coo(t)).bit_equal(t)


@st.composite
def sparse_tensors(draw):
    shape = tuple(draw(st.lists(st.integers(1, 5), min_size=1, max_size=3)))
    data = draw(hnp.arrays(np.float32, shape, elements=st.floats(-10, 10, width=32)))
    keep = draw(hnp.arrays(np.bool_, shape))
    return np.where(keep, data, np.float32(0.0))


@given(sparse_tensors())
def test_coo_round_trip(x):
    t = DenseTensor(x)
    assert from_coo(to_coo(t)).bit_equal(t)


@given(st.data())
def test_from_coo_matches_scalar_scatter(data):
    shape = tuple(data.draw(st.lists(st.integers(1, 4), min_size=1, max_size=3)))
    nnz = data.draw(st.integers(0, 12))
    idx = data.draw(hnp.arrays(np.uint32, (nnz, len(shape))))
    vals = data.draw(hnp.arrays(np.float32, nnz, elements=st.floats(-5, 5, width=32)))
    out = from_coo(SparseTensor(shape, idx, vals)).data
    assert np.array_equal(out.view(np.uint32), scatter(shape, idx, vals).view(np.uint32))


def test_container_header_layout():
    buf = dumps(DenseTensor(np.ones((2, 3), dtype=np.float32)))
    assert buf[:4] == b"FLT1"
    assert int.from_bytes(buf[4:12], "little") == 0
    assert int.from_bytes(buf[12:20], "little") == 2
    assert [int.from_bytes(buf[20 + 8 * i:28 + 8 * i], "little") for i in range(2)] == [2, 3]
    assert len(buf) == 4 + 8 * 4 + 6 * 4


def test_container_round_trips(tmp_path):
    rng = SplitMix64(9)
    dense = DenseTensor(from_bits((rng.u64(24) & np.uint64(0xFFFFFFFF)).astype(np.uint32)).reshape(2, 3, 4))
    quant = QuantTensor(np.array([[-(2**31), 0], [2**31 - 1, 7]], dtype=np.int32))
    coo = SparseTensor((3, 3), [[0, 1], [7, 2]], [1.5, -2.0])
    assert loads(dumps(dense)).bit_equal(dense)
    assert np.array_equal(loads(dumps(quant)).data, quant.data)
    back = loads(dumps(coo))
    assert back.dense_shape == (3, 3)
    assert np.array_equal(back.indices, coo.indices) and np.array_equal(back.values, coo.values)
    save(tmp_path / "t.flt", dense)
    assert load(tmp_path / "t.flt").bit_equal(dense)


def test_tensors_are_read_only():
    t = DenseTensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 3.0
