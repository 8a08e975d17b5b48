from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnfault.errors import ConflictingStuckAt, IndexOutOfRange, InvalidFault, ShapeMismatch
from nnfault.faultspec import (
    Fault,
    FaultArray,
    FaultKind,
    FaultMask,
    SiteType,
    TargetType,
    apply_mask,
    fault_count,
    flatten_faults,
    make_mask,
    sample_fault_array,
    sample_faults,
)
from nnfault.tensor import from_bits, to_bits

from oracles import fault_bits

KINDS = [k.value for k in FaultKind]


def fault(elem, bits, kind="bit_flip", layer="l", target="output", site="dense_float"):
    return Fault(layer, target, site, (elem,), (tuple(bits),), kind)


def test_make_mask_single_flip():
    m = make_mask([fault((0,), [31])], (2,))
    assert m.xor_mask.tolist() == [0x80000000, 0]
    assert m.or_mask.tolist() == [0, 0]
    assert m.and_mask.tolist() == [0xFFFFFFFF, 0xFFFFFFFF]


def test_make_mask_stuck_at_one():
    m = make_mask([fault((1,), [0], "stuck_at_one")], (2,))
    assert m.or_mask.tolist() == [0, 1]
    assert m.xor_mask.tolist() == [0, 0]
    assert m.and_mask.tolist() == [0xFFFFFFFF, 0xFFFFFFFF]


def test_make_mask_flip_plus_stuck_at_zero():
    m = make_mask([fault((0,), [1]), fault((0,), [2], "stuck_at_zero")], (1,))
    assert m.xor_mask.tolist() == [0x2]
    assert m.and_mask.tolist() == [0xFFFFFFFF & ~0x4]
    assert m.or_mask.tolist() == [0]
    for word in (0, 0xFFFFFFFF, 0x12345678):
        out = apply_mask(np.array([word], dtype=np.uint32), m)[0]
        assert out == fault_bits(word, [(1, "bit_flip"), (2, "stuck_at_zero")])


def test_apply_mask_examples():
    sign = make_mask([fault((0,), [31])], (1,))
    assert from_bits(apply_mask(to_bits(np.float32([1.0])), sign))[0] == -1.0
    stuck = make_mask([fault((0,), [30], "stuck_at_zero")], (1,))
    out = apply_mask(to_bits(np.float32([2.5])), stuck)
    assert out[0] == 0x00200000
    assert from_bits(out)[0] == pytest.approx(2.94e-39, rel=1e-3)


def test_neutral_mask_is_identity():
    x = np.array([0, 1, 0x7FC00000, 0xFFFFFFFF], dtype=np.uint32)
    m = FaultMask.neutral((4,))
    assert m.is_neutral()
    assert np.array_equal(apply_mask(x, m), x)


def test_conflicting_stuck_at():
    with pytest.raises(ConflictingStuckAt):
        make_mask([fault((0, 1), [3], "stuck_at_zero"), fault((0, 1), [3], "stuck_at_one")], (2, 2))
    # different bits of the same element are fine
    make_mask([fault((0, 1), [3], "stuck_at_zero"), fault((0, 1), [4], "stuck_at_one")], (2, 2))


def test_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        make_mask([fault((2, 0), [0])], (2, 2))
    with pytest.raises(IndexOutOfRange):
        make_mask([fault((0,), [0])], (2, 2))


def test_fault_validation():
    with pytest.raises(InvalidFault):
        fault((0,), [32])
    with pytest.raises(InvalidFault):
        Fault("l", "output", "dense_float", (), ())
    with pytest.raises(InvalidFault):
        fault((0,), [1], target="weight", site="quantized_int")
    with pytest.raises(InvalidFault):
        make_mask([fault((0,), [1], layer="a"), fault((0,), [1], layer="b")], (1,))


def test_apply_mask_shape_checks_and_batch_broadcast():
    m = make_mask([fault((1,), [0])], (3,))
    with pytest.raises(ShapeMismatch):
        apply_mask(np.zeros(4, dtype=np.uint32), m)
    batch = apply_mask(np.zeros((5, 3), dtype=np.uint32), m)
    assert batch[:, 1].tolist() == [1] * 5 and not batch[:, [0, 2]].any()


@st.composite
def fault_cases(draw):
    shape = tuple(draw(st.lists(st.integers(1, 4), min_size=1, max_size=3)))
    size = int(np.prod(shape))
    words = draw(st.lists(st.integers(0, 2**32 - 1), min_size=size, max_size=size))
    raw = draw(st.lists(st.tuples(st.integers(0, size - 1), st.integers(0, 31), st.sampled_from(KINDS)),
                        max_size=12))
    # drop entries that would make a stuck-at conflict
    seen: dict[tuple[int, int], str] = {}
    faults = []
    for e, b, k in raw:
        if k != "bit_flip":
            if seen.get((e, b), k) != k:
                continue
            seen[(e, b)] = k
        faults.append((e, b, k))
    return shape, words, faults


@given(fault_cases())
@settings(max_examples=300)
def test_mask_matches_scalar_oracle(case):
    shape, words, faults = case
    fl = [fault(tuple(int(c) for c in np.unravel_index(e, shape)), [b], k) for e, b, k in faults]
    x = np.array(words, dtype=np.uint32).reshape(shape)
    if fl:
        got = apply_mask(x, make_mask(fl, shape)).ravel().tolist()
    else:
        got = x.ravel().tolist()
    want = [fault_bits(w, [(b, k) for e, b, k in faults if e == i]) for i, w in enumerate(words)]
    assert got == want


@given(fault_cases())
def test_idempotence(case):
    shape, words, faults = case
    x = np.array(words, dtype=np.uint32).reshape(shape)
    stuck = [fault(tuple(np.unravel_index(e, shape)), [b], k) for e, b, k in faults if k != "bit_flip"]
    flips = [fault(tuple(np.unravel_index(e, shape)), [b], k) for e, b, k in faults if k == "bit_flip"]
    if stuck:
        m = make_mask(stuck, shape)
        assert np.array_equal(apply_mask(apply_mask(x, m), m), apply_mask(x, m))
    if flips:
        m = make_mask(flips, shape)
        assert np.array_equal(apply_mask(apply_mask(x, m), m), x)


def test_disjoint_masks_commute():
    x = np.arange(6, dtype=np.uint32).reshape(2, 3) * np.uint32(0x01010101)
    a = make_mask([fault((0, 0), [3]), fault((1, 2), [7], "stuck_at_one")], (2, 3))
    b = make_mask([fault((0, 1), [5], "stuck_at_zero"), fault((1, 0), [31])], (2, 3))
    assert np.array_equal(apply_mask(apply_mask(x, a), b), apply_mask(apply_mask(x, b), a))


def test_fault_count_rounding():
    assert fault_count(1e-7, 10**7) == 1
    assert fault_count(1.0, 1234) == 1234
    assert fault_count(0.0, 1234) == 0
    assert fault_count(0.5, 3) == 2  # round half to even: 1.5 -> 2
    assert fault_count(0.5, 5) == 2  # 2.5 -> 2


def test_sample_faults_examples():
    one = sample_faults(1e-7, 10**7, (10**7,), "fc", "weight", "dense_float", "bit_flip", 0)
    assert len(one) == 1
    full = sample_faults(1.0, 60, (6, 10), "fc", "weight", "dense_float", "bit_flip", 3)
    assert sorted(f.element_indices[0] for f in full) == [(i, j) for i in range(6) for j in range(10)]
    assert sample_faults(0.0, 60, (6, 10), "fc", "weight", "dense_float", "bit_flip", 3) == []


@given(st.floats(0, 1), st.integers(1, 3000), st.integers(0, 2**32))
@settings(max_examples=100)
def test_count_law_distinctness_determinism(rate, n, seed):
    a = sample_fault_array(rate, n, (n,), "x", "output", "dense_float", "bit_flip", seed)
    b = sample_fault_array(rate, n, (n,), "x", "output", "dense_float", "bit_flip", seed)
    assert len(a) == round(rate * n)
    assert len(set(a.flat_index.tolist())) == len(a)
    assert np.array_equal(a.flat_index, b.flat_index) and np.array_equal(a.bit_positions, b.bit_positions)
    assert ((a.bit_positions >= 0) & (a.bit_positions <= 31)).all()


def test_bit_choices_restrict_bits():
    a = sample_fault_array(0.5, 100, (100,), "x", "weight", "dense_float", "bit_flip", 1, bits=[31])
    assert set(a.bit_positions.tolist()) == {31}
    b = sample_fault_array(0.5, 100, (100,), "x", "weight", "dense_float", "bit_flip", 1)
    assert np.array_equal(a.flat_index, b.flat_index)


def test_fault_array_equals_fault_list():
    shape = (4, 5)
    fa = sample_fault_array(0.6, None, shape, "l", "output", "quantized_int", "stuck_at_one", 11)
    as_faults = fa.to_faults(shape)
    assert len(as_faults) == len(fa)
    a = make_mask([fa], shape)
    b = make_mask(as_faults, shape)
    for name in ("and_mask", "or_mask", "xor_mask"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    flat, bits, kinds = flatten_faults([fa], shape)
    assert set(kinds.tolist()) == {2}


def test_fault_array_range_check():
    fa = FaultArray("l", TargetType.OUTPUT, SiteType.DENSE_FLOAT, [7], [0])
    with pytest.raises(IndexOutOfRange):
        make_mask([fa], (2, 3))
