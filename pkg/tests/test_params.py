import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from flatmtl.errors import NumericalError, PartitionError
from flatmtl.params import (ParamPartition, as_param_vector, axpy, gaussian_direction, l2_norm, make_rng,
                            slice_nonshared, slice_shared)

# magnitudes kept away from the subnormal range so products do not underflow
finite = st.one_of(st.just(0.0), st.floats(1e-50, 1e6), st.floats(-1e6, -1e-50))


def test_slice_shared_example():
    p = ParamPartition((0, 2), ((2, 3), (3, 4)))
    v = np.array([1.0, 2, 3, 4])
    assert slice_shared(v, p).tolist() == [1, 2]
    assert slice_nonshared(v, p, 1).tolist() == [4]


def test_partition_rejects_missing_nonshared_block():
    with pytest.raises(PartitionError):
        ParamPartition((0, 1), ())
    with pytest.raises(PartitionError):
        ParamPartition((0, 1), ((1, 1),))


def test_partition_coverage_mismatch():
    p = ParamPartition.from_sizes(5, [2, 2])
    with pytest.raises(PartitionError):
        slice_shared(np.zeros(10), p)


@pytest.mark.parametrize("shared,ns", [((0, 3), ((2, 4),)), ((0, 2), ((3, 4),)), ((1, 3), ((3, 4),))])
def test_partition_overlap_gap_offset(shared, ns):
    with pytest.raises(PartitionError):
        ParamPartition(shared, ns)


def test_partition_roundtrip_and_mask():
    p = ParamPartition.from_sizes(3, [2, 1])
    assert ParamPartition.from_dict(p.to_dict()) == p
    assert p.size == 6 and p.task_count == 2
    assert p.task_mask(1).tolist() == [True, True, True, False, False, True]
    with pytest.raises(IndexError):
        p.nonshared_slice(2)


@pytest.mark.parametrize("alpha,x,y,out", [(0, [9, 9], [1, 2], [1, 2]), (-1, [3, 3], [3, 3], [0, 0]),
                                           (2, [1, -1], [0, 1], [2, -1])])
def test_axpy_examples(alpha, x, y, out):
    assert axpy(alpha, np.array(x, float), np.array(y, float)).tolist() == out


def test_axpy_errors():
    with pytest.raises(ValueError):
        axpy(1.0, np.zeros(2), np.zeros(3))
    with pytest.raises(NumericalError):
        axpy(1e308, np.array([1e308]), np.array([0.0]))


@pytest.mark.parametrize("x,n", [([3, 4], 5), ([0, 0, 0], 0), ([1, 1, 1, 1], 2)])
def test_l2_norm_examples(x, n):
    assert l2_norm(np.array(x, float)) == n


def test_l2_norm_rejects_nan():
    with pytest.raises(NumericalError):
        l2_norm(np.array([np.nan]))


@given(st.one_of(st.floats(1e-50, 1e3), st.floats(-1e3, -1e-50), st.just(0.0)),
       arrays(np.float64, st.integers(1, 20), elements=finite))
def test_norm_scaling_identity(a, x):
    lhs = l2_norm(axpy(a, x, np.zeros_like(x)))
    rhs = abs(a) * l2_norm(x)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)


def test_gaussian_direction():
    a = gaussian_direction(make_rng(7), 5)
    b = gaussian_direction(make_rng(7), 5)
    assert np.array_equal(a, b)
    big = gaussian_direction(make_rng(0), 10_000)
    assert abs(big.mean()) < 0.05 and abs(big.std() - 1) < 0.05
    with pytest.raises(ValueError):
        gaussian_direction(make_rng(0), 0)


def test_as_param_vector():
    assert as_param_vector([[1, 2]]).tolist() == [1, 2]
    with pytest.raises(ValueError):
        as_param_vector([])
    with pytest.raises(NumericalError):
        as_param_vector([np.inf])
