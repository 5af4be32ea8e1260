"""Combine m shared-block gradients into one update direction.

Five strategies are provided:

* ``mean``: plain average.
* ``mgda``: minimum-norm point of the convex hull of the gradients. Two tasks
  use the closed-form projection; more tasks use Frank-Wolfe with away steps
  and exact two-point line search on the Gram matrix.
* ``pcgrad``: each gradient is projected onto the normal plane of every other
  gradient it conflicts with (negative inner product), visiting the others in a
  seeded random order; the projected gradients are averaged.
* ``cagrad``: with ``g0`` the mean gradient and ``phi = c |g0|``, solve
  ``min_w <g_w, g0> + phi |g_w|`` over the simplex and return
  ``g0 + phi * g_w / |g_w|``. This is the dual of maximizing the worst task
  improvement ``min_i <g_i, d>`` over the ball ``|d - g0| <= phi``.
* ``imtl``: the combination ``d = sum a_i g_i`` with ``sum a_i = 1`` whose
  projections onto every unit gradient ``u_i`` are equal.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import SolverError

log = logging.getLogger(__name__)

METHODS = ("mean", "mgda", "pcgrad", "cagrad", "imtl")


@dataclass(frozen=True)
class AggregationMethod:
    name: str = "mean"
    cagrad_c: float = 0.4
    max_iterations: int = 500
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown aggregation method {self.name!r}; expected one of {METHODS}")
        if not (0.0 <= self.cagrad_c < 1.0):
            raise ValueError(f"cagrad c must lie in [0, 1), got {self.cagrad_c}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


def _stack(grads) -> np.ndarray:
    if len(grads) == 0:
        raise ValueError("need at least one gradient")
    arrs = [np.asarray(g, dtype=np.float64).reshape(-1) for g in grads]
    n = arrs[0].shape[0]
    for g in arrs:
        if g.shape[0] != n:
            raise ValueError(f"length mismatch among gradients: {g.shape[0]} vs {n}")
    return np.stack(arrs)


def mean(grads) -> np.ndarray:
    A = _stack(grads)
    if A.shape[0] == 1:
        return A[0].copy()
    return A.mean(axis=0)


def mgda_minnorm(grads, max_iterations: int = 500, tolerance: float = 1e-8):
    """Simplex weights minimizing ``|sum w_i g_i|`` and the resulting vector."""
    A = _stack(grads)
    m = A.shape[0]
    if m == 1:
        return np.ones(1), A[0].copy()
    G = A @ A.T
    if m == 2:
        gamma = kernels.minnorm_2(G[0, 0], G[0, 1], G[1, 1])
        w = np.array([gamma, 1.0 - gamma])
    else:
        w, iters, residual, ok = kernels.minnorm_fw(G, max_iterations, tolerance)
        if not ok:
            raise SolverError("min-norm Frank-Wolfe did not converge", residual, iters)
    return w, w @ A


def pcgrad_projections(grads, rng: np.random.Generator):
    """Projected copies of every task gradient and the smallest post-projection dot product."""
    A = _stack(grads)
    m = A.shape[0]
    if m == 1:
        return A.copy(), math.inf
    orders = np.empty((m, m - 1), dtype=np.int64)
    for i in range(m):
        others = np.array([j for j in range(m) if j != i], dtype=np.int64)
        orders[i] = rng.permutation(others)
    return kernels.pcgrad_project(A, orders)


def pcgrad(grads, rng: np.random.Generator) -> np.ndarray:
    A = _stack(grads)
    if A.shape[0] == 1:
        return A[0].copy()
    projected, _ = pcgrad_projections(A, rng)
    return projected.mean(axis=0)


def cagrad(grads, c: float = 0.4, max_iterations: int = 500, tolerance: float = 1e-8) -> np.ndarray:
    if not 0.0 <= c < 1.0:
        raise ValueError(f"cagrad c must lie in [0, 1), got {c}")
    A = _stack(grads)
    m = A.shape[0]
    if m == 1:
        return A[0].copy()
    g0 = A.mean(axis=0)
    if c == 0.0:
        return g0
    G = A @ A.T
    w, iters, residual, ok = kernels.cagrad_dual(G, c, max_iterations, tolerance)
    if not ok:
        raise SolverError("CAGrad dual solver did not converge", residual, iters)
    gw = w @ A
    gw_norm = float(np.linalg.norm(gw))
    scale = float(np.sqrt(np.max(np.diag(G))))
    if gw_norm < tolerance * scale:
        return g0
    phi = c * float(np.linalg.norm(g0))
    return g0 + (phi / gw_norm) * gw


def imtl_g(grads) -> np.ndarray:
    A = _stack(grads)
    m = A.shape[0]
    if m == 1:
        return A[0].copy()
    norms = np.linalg.norm(A, axis=1)
    keep = norms > 1e-12 * max(float(norms.max()), 1e-300)
    if not keep.all():
        log.warning("IMTL-G: dropping %d zero-gradient task(s)", int((~keep).sum()))
        A, norms = A[keep], norms[keep]
        if A.shape[0] == 0:
            return np.zeros(len(grads[0]))
        if A.shape[0] == 1:
            return A[0].copy()
    k = A.shape[0]
    # P[j, i] = <g_j, u_i>
    P = (A @ A.T) / norms[None, :]
    M = np.empty((k, k))
    M[0] = 1.0
    M[1:] = (P[:, [0]] - P[:, 1:]).T
    rhs = np.zeros(k)
    rhs[0] = 1.0
    try:
        if np.linalg.cond(M) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        alpha = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        log.warning("IMTL-G: singular system (near-parallel gradients), falling back to mean")
        return A.mean(axis=0)
    return alpha @ A


def aggregate(method: AggregationMethod, grads, rng: np.random.Generator | None = None) -> np.ndarray:
    """Dispatch to the strategy named by ``method``."""
    A = _stack(grads)
    if A.shape[0] == 1:
        return A[0].copy()
    if method.name == "mean":
        return mean(A)
    if method.name == "mgda":
        return mgda_minnorm(A, method.max_iterations, method.tolerance)[1]
    if method.name == "pcgrad":
        if rng is None:
            raise ValueError("pcgrad needs an rng for its projection order")
        return pcgrad(A, rng)
    if method.name == "cagrad":
        return cagrad(A, method.cagrad_c, method.max_iterations, method.tolerance)
    return imtl_g(A)
