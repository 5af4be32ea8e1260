"""Flatness and quality measurements.

* :func:`rho_sharpness`: worst-case loss increase inside an L2 ball.
* :func:`robustness_probe`: task metrics under random parameter noise of fixed norm.
* :func:`loss_surface_grid`: task loss on a 2-D slice through parameter space.
* :func:`delta_m`: mean signed relative change against single-task baselines.
* :func:`brier_score`, :func:`ece`, :func:`predictive_entropy`: calibration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError
from .models import MultiTaskProblem, task_loss, task_loss_and_grad


@dataclass
class SharpnessReport:
    rho: float
    task: int
    base_loss: float
    worst_loss: float
    sam_step_loss: float
    evaluations: int

    @property
    def sharpness(self) -> float:
        return self.worst_loss - self.base_loss


def _project_ball(eps, rho):
    n = float(np.linalg.norm(eps))
    return eps if n <= rho else eps * (rho / n)


def _support(problem, i, shared_only):
    p = problem.partition
    mask = np.zeros(p.size, dtype=bool)
    mask[p.shared_slice()] = True
    if not shared_only:
        mask[p.nonshared_slice(i)] = True
    return mask


def rho_sharpness(problem: MultiTaskProblem, i: int, theta, rho: float, batch=None, *, steps: int = 20,
                  restarts: int = 4, rng: np.random.Generator | None = None,
                  shared_only: bool = False) -> SharpnessReport:
    """Estimate ``max_{|eps| <= rho} L_i(theta + eps) - L_i(theta)``.

    Projected normalized gradient ascent on ``eps``, first from the single SAM
    step ``rho * g / |g|`` and then from ``restarts`` random points on the
    sphere. Step ``t`` of every run moves by ``rho / (t + 1)``. The report
    keeps the best loss seen (``eps = 0`` included), so the estimate never
    decreases as ``steps`` or ``restarts`` grow. Only the coordinates task
    ``i`` depends on are perturbed; the others cannot change its loss.
    """
    theta = np.asarray(theta, dtype=np.float64)
    base = task_loss(problem, i, theta, batch)
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if rho == 0:
        return SharpnessReport(0.0, i, base, base, base, 1)
    rng = rng if rng is not None else np.random.default_rng(0)
    mask = _support(problem, i, shared_only)
    _, g = task_loss_and_grad(problem, i, theta, batch)
    g = np.where(mask, g, 0.0)
    gn = float(np.linalg.norm(g))
    sam_eps = g * (rho / gn) if gn > 0 else np.zeros_like(g)
    sam_loss = task_loss(problem, i, theta + sam_eps, batch)
    best = max(base, sam_loss)
    evals = 2
    starts = [sam_eps]
    for _ in range(restarts):
        d = np.where(mask, rng.standard_normal(theta.shape[0]), 0.0)
        starts.append(d * (rho / float(np.linalg.norm(d))))
    for eps in starts:
        for t in range(steps):
            value, gr = task_loss_and_grad(problem, i, theta + eps, batch)
            evals += 1
            best = max(best, value)
            gr = np.where(mask, gr, 0.0)
            n = float(np.linalg.norm(gr))
            if n == 0.0:
                break
            eps = _project_ball(eps + (rho / (t + 1)) * gr / n, rho)
        best = max(best, task_loss(problem, i, theta + eps, batch))
        evals += 1
    return SharpnessReport(rho, i, base, best, sam_loss, evals)


@dataclass
class ProbeTable:
    radii: list
    metric: str
    mean: list = field(default_factory=list)
    std: list = field(default_factory=list)

    def rows(self):
        for r, mu, sd in zip(self.radii, self.mean, self.std):
            yield r, mu, sd


def robustness_probe(problem: MultiTaskProblem, theta, radii: Sequence[float], samples_per_radius: int = 10,
                     rng: np.random.Generator | None = None, eval_batch=None, *,
                     shared_only: bool = False) -> ProbeTable:
    """Task metrics at ``theta + eps`` with ``eps`` uniform on the sphere of radius r.

    For each radius, ``samples_per_radius`` directions are drawn and the mean
    and standard deviation of every task metric are reported. Radius 0 is
    evaluated once, exactly at ``theta``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    p = problem.partition
    mask = np.zeros(p.size, dtype=bool)
    if shared_only:
        mask[p.shared_slice()] = True
    else:
        mask[:] = True
    table = ProbeTable(radii=[float(r) for r in radii], metric=problem.metric_name)
    for r in table.radii:
        if r < 0:
            raise ValueError("radii must be non-negative")
        if r == 0:
            base = problem.evaluate(theta, eval_batch)
            table.mean.append([float(v) for v in base])
            table.std.append([0.0] * len(base))
            continue
        samples = []
        for _ in range(samples_per_radius):
            d = np.where(mask, rng.standard_normal(p.size), 0.0)
            samples.append(problem.evaluate(theta + d * (r / float(np.linalg.norm(d))), eval_batch))
        arr = np.asarray(samples, dtype=np.float64)
        table.mean.append(arr.mean(axis=0).tolist())
        table.std.append(arr.std(axis=0).tolist())
    return table


@dataclass
class SurfaceGrid:
    coords: np.ndarray
    values: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


def param_blocks(problem: MultiTaskProblem) -> list:
    """Slices used for filter normalization: per-layer when the model defines them."""
    if hasattr(problem, "layer_blocks"):
        return problem.layer_blocks()
    p = problem.partition
    return [p.shared_slice()] + [p.nonshared_slice(i) for i in range(p.task_count)]


def surface_directions(problem, theta, rng, filter_norm: bool = True):
    """Two orthogonal random directions.

    Without filter normalization the pair is orthonormal. With it, each block
    of ``d1`` is rescaled to the norm of the same block of ``theta``; ``d2`` is
    built the same way, made orthogonal to ``d1`` and scaled back to its
    pre-projection norm.
    """
    n = theta.shape[0]
    d1 = rng.standard_normal(n)
    d2 = rng.standard_normal(n)
    if filter_norm:
        for sl in param_blocks(problem):
            tn = float(np.linalg.norm(theta[sl]))
            for d in (d1, d2):
                dn = float(np.linalg.norm(d[sl]))
                if dn > 0:
                    d[sl] *= (tn if tn > 0 else 1.0) / dn
        keep = float(np.linalg.norm(d2))
        d2 = d2 - (float(d1 @ d2) / float(d1 @ d1)) * d1
        d2 *= keep / float(np.linalg.norm(d2))
    else:
        d1 /= np.linalg.norm(d1)
        d2 = d2 - float(d1 @ d2) * d1
        d2 /= np.linalg.norm(d2)
    # second pass cleans residual rounding in the inner product
    d2 = d2 - (float(d1 @ d2) / float(d1 @ d1)) * d1
    return d1, d2


def loss_surface_grid(problem: MultiTaskProblem, i: int, theta, rng: np.random.Generator, extent: float = 1.0,
                      resolution: int = 21, batch=None, *, filter_norm: bool = True) -> SurfaceGrid:
    """Task-i loss at ``theta + a d1 + b d2`` on a ``resolution x resolution`` grid over [-extent, extent]^2.

    ``values[j, k]`` holds the loss at ``a = coords[j]``, ``b = coords[k]``.
    For odd resolutions the middle coordinate is exactly 0.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    theta = np.asarray(theta, dtype=np.float64)
    d1, d2 = surface_directions(problem, theta, rng, filter_norm)
    k = np.arange(resolution)
    coords = extent * (2 * k - (resolution - 1)) / (resolution - 1)
    values = np.empty((resolution, resolution))
    for a_idx, a in enumerate(coords):
        for b_idx, b in enumerate(coords):
            values[a_idx, b_idx] = problem.loss(i, theta + a * d1 + b * d2, batch)
    return SurfaceGrid(coords, values, d1, d2)


def delta_m(metrics: Sequence[float], baselines: Sequence[float], lower_is_better: Sequence[bool]) -> float:
    """Mean relative change against single-task baselines, in percent; negative is better.

    Per task: ``-100 * (-1)^l * (M - S) / S`` with ``l = 1`` when lower values are
    better, so improving on every task gives a negative result.
    """
    if not (len(metrics) == len(baselines) == len(lower_is_better)):
        raise ValueError("metrics, baselines and flags must have equal length")
    if len(metrics) == 0:
        raise ValueError("need at least one task")
    total = 0.0
    for m_i, s_i, low in zip(metrics, baselines, lower_is_better):
        if s_i == 0:
            raise ValueError("single-task baseline must be non-zero")
        sign = -1.0 if low else 1.0
        total += -100.0 * sign * (m_i - s_i) / s_i
    return total / len(metrics)


def _check_probs(p, labels=None):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise DataError("predictions must be an N x C matrix")
    if np.any(p < -1e-12) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise DataError("each prediction row must be a probability vector")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (p.shape[0],):
            raise DataError("need one label per prediction row")
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= p.shape[1]:
            raise DataError("label out of range")
    return p, labels


def brier_score(predictions, labels) -> float:
    """``(1/N) sum_i sum_c (p_ic - [y_i == c])^2``."""
    p, y = _check_probs(predictions, labels)
    onehot = np.zeros_like(p)
    onehot[np.arange(p.shape[0]), y] = 1.0
    return float(((p - onehot) ** 2).sum(axis=1).mean())


def ece(predictions, labels, bins: int = 10) -> float:
    """Expected calibration error with equal-width confidence bins over (0, 1].

    Bin ``b`` holds confidences in ``((b-1)/bins, b/bins]``; empty bins
    contribute nothing.
    """
    if bins < 1:
        raise ValueError("bins must be at least 1")
    p, y = _check_probs(predictions, labels)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    n = p.shape[0]
    total = 0.0
    for b in range(bins):
        sel = idx == b
        cnt = int(sel.sum())
        if cnt:
            total += cnt / n * abs(float(correct[sel].mean()) - float(conf[sel].mean()))
    return total


def predictive_entropy(row, normalize_by_classes: bool = True) -> float:
    """``(1/C) sum_c -p_c ln p_c`` with ``0 ln 0 = 0``; pass ``normalize_by_classes=False`` for plain entropy."""
    p = np.asarray(row, dtype=np.float64).reshape(-1)
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    return h / p.shape[0] if normalize_by_classes else h


def entropy_histogram(predictions, bins: int = 10, normalize_by_classes: bool = True):
    p, _ = _check_probs(predictions)
    values = np.array([predictive_entropy(r, normalize_by_classes) for r in p])
    upper = math.log(p.shape[1]) / (p.shape[1] if normalize_by_classes else 1)
    counts, edges = np.histogram(values, bins=bins, range=(0.0, upper))
    return counts, edges


@dataclass
class CalibrationReport:
    brier: float
    ece: float
    bins: int
    entropy_counts: list
    entropy_edges: list


def calibration_report(predictions, labels, bins: int = 10) -> CalibrationReport:
    counts, edges = entropy_histogram(predictions, bins)
    return CalibrationReport(brier_score(predictions, labels), ece(predictions, labels, bins), bins,
                             counts.tolist(), edges.tolist())
