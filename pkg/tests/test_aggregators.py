import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flatmtl.aggregators import (METHODS, AggregationMethod, aggregate, cagrad, imtl_g, mean, mgda_minnorm,
                                 pcgrad, pcgrad_projections)
from flatmtl.errors import SolverError

E1, E2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])


def _agg(name, grads, seed=0, **kw):
    return aggregate(AggregationMethod(name, **kw), grads, np.random.default_rng(seed))


@pytest.mark.parametrize("name", METHODS)
def test_single_task_returns_input(name, backend):
    g = np.array([1.0, 2.0])
    out = _agg(name, [g])
    assert np.array_equal(out, g) and out is not g


@pytest.mark.parametrize("name", METHODS)
def test_identical_gradients(name, backend):
    g = np.array([0.3, -1.2, 2.0])
    out = _agg(name, [g, g, g])
    if name == "cagrad":
        # the dual solution moves g0 by c|g0| along g, giving (1 + c) g
        assert np.allclose(out, 1.4 * g, atol=1e-9)
    else:
        assert np.allclose(out, g, atol=1e-12)


def test_mean_example():
    assert _agg("mean", [E1, E2]).tolist() == [0.5, 0.5]


def test_mgda_examples(backend):
    w, d = mgda_minnorm([E1, E2])
    assert np.allclose(w, [0.5, 0.5]) and np.allclose(d, [0.5, 0.5]) and d @ d == pytest.approx(0.5)
    w, d = mgda_minnorm([2 * E1, E1])
    assert np.allclose(w, [0, 1]) and np.allclose(d, E1)
    assert np.allclose(mgda_minnorm([E1, -E1])[1], 0)


def test_mgda_beats_random_simplex_points(backend, rng):
    for m in (3, 4, 6):
        A = rng.normal(size=(m, 5))
        _, d = mgda_minnorm(A)
        W = rng.dirichlet(np.ones(m), size=1000)
        assert np.linalg.norm(W @ A, axis=1).min() >= np.linalg.norm(d) - 1e-6


def test_mgda_nonconvergence_is_an_error(backend, rng):
    A = rng.normal(size=(6, 6))
    with pytest.raises(SolverError):
        mgda_minnorm(A, max_iterations=1, tolerance=1e-15)


def test_pcgrad_example(backend):
    out = pcgrad([E1, np.array([-1.0, 1.0])], np.random.default_rng(0))
    assert np.allclose(out, [0.25, 0.75], atol=1e-12)
    assert np.allclose(pcgrad([E1, E2], np.random.default_rng(0)), [0.5, 0.5])


def test_pcgrad_does_not_mutate_and_is_seeded(backend, rng):
    A = rng.normal(size=(4, 6))
    before = A.copy()
    a = pcgrad(A, np.random.default_rng(3))
    b = pcgrad(A, np.random.default_rng(3))
    assert np.array_equal(A, before) and np.array_equal(a, b)
    _, worst = pcgrad_projections(A, np.random.default_rng(3))
    assert worst >= -1e-9


def test_pcgrad_skips_zero_gradient(backend):
    out = pcgrad([E1, np.zeros(2)], np.random.default_rng(0))
    assert np.allclose(out, [0.5, 0.0])


def test_pcgrad_needs_rng():
    with pytest.raises(ValueError):
        aggregate(AggregationMethod("pcgrad"), [E1, E2])


def test_cagrad_zero_c_is_mean(backend, rng):
    A = rng.normal(size=(3, 4))
    assert np.array_equal(cagrad(A, 0.0), A.mean(axis=0))


def test_cagrad_feasible_and_grid_optimal(backend):
    g0 = 0.5 * (E1 + E2)
    d = cagrad([E1, E2], 0.5)
    r = 0.5 * np.linalg.norm(g0)
    assert np.linalg.norm(d - g0) <= r + 1e-6
    xs = np.arange(-r, r + 1e-12, 1e-2)
    P = np.array([(a, b) for a in xs for b in xs if a * a + b * b <= r * r]) + g0
    best = np.minimum(P[:, 0], P[:, 1]).max()
    assert min(d @ E1, d @ E2) >= best - 1e-4


def test_cagrad_rejects_bad_c():
    with pytest.raises(ValueError):
        AggregationMethod("cagrad", cagrad_c=1.0)
    with pytest.raises(ValueError):
        cagrad([E1, E2], -0.1)


def test_imtl_examples(backend):
    d = imtl_g([E1, E2])
    assert np.allclose(d, [0.5, 0.5])
    assert d @ E1 == pytest.approx(0.5) and d @ E2 == pytest.approx(0.5)
    d = imtl_g([2 * E1, E2])
    u = [E1, E2]
    assert abs(d @ u[0] - d @ u[1]) <= 1e-9


def test_imtl_drops_zero_and_falls_back(caplog):
    with caplog.at_level(logging.WARNING):
        assert np.allclose(imtl_g([E1, np.zeros(2)]), E1)
        out = imtl_g([E1, E1 * (1 + 1e-15), E2])
    assert "dropping" in caplog.text
    assert np.all(np.isfinite(out))


def test_length_mismatch_and_unknown_method():
    with pytest.raises(ValueError):
        mean([E1, np.zeros(3)])
    with pytest.raises(ValueError):
        mean([])
    with pytest.raises(ValueError):
        AggregationMethod("nash")


grad_sets = st.integers(2, 4).flatmap(
    lambda m: st.lists(st.lists(st.floats(-10, 10, allow_subnormal=False), min_size=3, max_size=3),
                       min_size=m, max_size=m))


@pytest.mark.parametrize("name", METHODS)
@given(grads=grad_sets, s=st.floats(0.1, 10))
@settings(max_examples=40, deadline=None)
def test_scale_consistency(name, grads, s):
    A = np.array(grads)
    if np.linalg.norm(A, axis=1).min() < 1e-3:
        return
    method = AggregationMethod(name)
    base = aggregate(method, A, np.random.default_rng(1))
    scaled = aggregate(method, s * A, np.random.default_rng(1))
    assert np.allclose(scaled, s * base, rtol=1e-6, atol=1e-6 * s * np.abs(A).max())


@given(grads=grad_sets, c=st.floats(0.0, 0.99))
@settings(max_examples=60, deadline=None)
def test_cagrad_always_feasible(grads, c):
    A = np.array(grads)
    d = cagrad(A, c)
    g0 = A.mean(axis=0)
    assert np.linalg.norm(d - g0) <= c * np.linalg.norm(g0) * (1 + 1e-6) + 1e-12


@given(grads=grad_sets)
@settings(max_examples=60, deadline=None)
def test_imtl_equal_projections(grads):
    A = np.array(grads)
    norms = np.linalg.norm(A, axis=1)
    if norms.min() < 1e-3:
        return
    d = imtl_g(A)
    proj = (A / norms[:, None]) @ d
    if np.allclose(d, A.mean(axis=0)) and np.ptp(proj) > 1e-8 * np.linalg.norm(d):
        return  # singular-system fallback
    # d can be exactly zero (opposite gradients); then roundoff relative to |g| is all that remains
    assert np.ptp(proj) <= 1e-8 * np.linalg.norm(d) + 1e-12 * norms.max()
