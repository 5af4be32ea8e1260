import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from flatmtl.errors import DataError
from flatmtl.idx import (IDX_TYPES, IdxTensor, compose_multitask_pairs, encode_idx, overlap_region, parse_idx,
                         read_idx, write_idx)

# 2 images of 2x2 unsigned bytes, written out by hand from the format description
HAND = bytes([0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4, 250, 251, 252, 253])


def test_hand_crafted_file(tmp_path):
    path = tmp_path / "imgs.idx"
    path.write_bytes(HAND)
    t = read_idx(path)
    assert t.dims == (2, 2, 2) and t.type_code == 0x08
    assert t.array.tolist() == [[[1, 2], [3, 4]], [[250, 251], [252, 253]]]
    assert encode_idx(t) == HAND


@pytest.mark.parametrize("raw,msg", [
    (bytes([1, 0, 8, 1, 0, 0, 0, 1, 5]), "bad magic"),
    (HAND[:-1], "short payload"),
    (HAND[:6], "short payload"),
    (b"\x00\x00", "short payload"),
    (HAND + b"\x00", "trailing data"),
    (bytes([0, 0, 0x07, 1, 0, 0, 0, 0]), "unsupported type code"),
])
def test_parse_errors(raw, msg):
    with pytest.raises(DataError, match=msg):
        parse_idx(raw)


def test_multibyte_types_are_big_endian():
    raw = encode_idx(np.array([1, -2], dtype=np.int32))
    assert raw[2] == 0x0C and raw[8:] == struct.pack(">ii", 1, -2)
    with pytest.raises(DataError):
        encode_idx(np.array([1], dtype=np.uint64))
    with pytest.raises(DataError):
        IdxTensor((3,), 0x08, np.zeros(2, np.uint8))


dtypes = st.sampled_from([np.dtype(t.str.replace(">", "<")) for t in IDX_TYPES.values()])


@given(dtypes.flatmap(lambda dt: arrays(dt, array_shapes(min_dims=1, max_dims=4, max_side=5))))
@settings(max_examples=80, deadline=None)
def test_roundtrip_property(arr):
    raw = encode_idx(arr)
    back = parse_idx(raw)
    assert back.array.shape == arr.shape
    np.testing.assert_array_equal(back.array, arr)
    assert encode_idx(back) == raw


def test_write_read_file(tmp_path):
    arr = np.arange(12, dtype=np.float64).reshape(3, 4) / 7
    write_idx(tmp_path / "x.idx", arr)
    assert np.array_equal(read_idx(tmp_path / "x.idx").array, arr)


def _digits(n, seed):
    r = np.random.default_rng(seed)
    return r.integers(0, 256, size=(n, 28, 28)).astype(np.uint8), r.integers(0, 10, size=n).astype(np.uint8)


def test_composer_geometry():
    rows, cols = overlap_region((28, 28), (36, 36))
    assert (rows.start, rows.stop, cols.start, cols.stop) == (8, 28, 8, 28)
    A = np.full((1, 28, 28), 0.25)
    B = np.full((1, 28, 28), 0.75)
    ds = compose_multitask_pairs(A, [3], B, [7], np.random.default_rng(0), 2)
    img = ds.images[0]
    covered_a = np.zeros((36, 36), bool)
    covered_a[:28, :28] = True
    covered_b = np.zeros((36, 36), bool)
    covered_b[8:, 8:] = True
    both = covered_a & covered_b
    assert both.sum() == 400 and np.array_equal(np.argwhere(both).min(0), [8, 8])
    assert np.all(img[both] == 0.75) and np.all(img[covered_a & ~covered_b] == 0.25)
    assert np.all(img[~covered_a & ~covered_b] == 0)
    assert ds.labels_task1.tolist() == [3, 3] and ds.labels_task2.tolist() == [7, 7]


def test_composer_is_seeded_and_normalizes():
    imgs, labels = _digits(20, 1)
    a = compose_multitask_pairs(imgs, labels, imgs, labels, np.random.default_rng(4), 15)
    b = compose_multitask_pairs(imgs, labels, imgs, labels, np.random.default_rng(4), 15)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels_task2, b.labels_task2)
    assert a.images.max() <= 1.0 and a.meta["normalization"] == "divide_by_255"


def test_composer_errors():
    imgs, labels = _digits(3, 0)
    with pytest.raises(DataError):
        compose_multitask_pairs(imgs, labels, imgs, labels, np.random.default_rng(0), 0)
    with pytest.raises(DataError):
        compose_multitask_pairs(imgs, labels[:2], imgs, labels, np.random.default_rng(0), 1)
    with pytest.raises(DataError):
        compose_multitask_pairs(imgs, labels, imgs, labels, np.random.default_rng(0), 1, canvas=(20, 20))
