"""Per-task worst-case perturbations, SAM gradients and the loss/flat decomposition.

For each task ``i`` the shared block gets its own perturbation
``eps_sh^i = rho_sh * g_sh / |g_sh|`` and the task's non-shared block gets
``eps_ns^i = rho_ns * g_ns / |g_ns|``. The SAM gradient of the shared block is
taken at ``(theta_sh + eps_sh^i, theta_ns^i)`` and that of the non-shared
block at ``(theta_sh, theta_ns^i + eps_ns^i)``. The shared SAM gradient is
split into the plain loss gradient and the remainder, the flat gradient.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .models import MultiTaskProblem, task_loss_and_grad


@dataclass(frozen=True)
class PerturbConfig:
    rho_sh: float
    rho_ns: float
    adaptive: bool = False
    epsilon_floor: float = 1e-12
    # elementwise offset of the adaptive scaling |theta| + adaptive_eta
    adaptive_eta: float = 0.01
    # one perturbed evaluation per task at (theta_sh + eps_sh, theta_ns + eps_ns)
    joint: bool = False

    def __post_init__(self):
        for name in ("rho_sh", "rho_ns"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v}")
        if not self.epsilon_floor > 0:
            raise ValueError("epsilon_floor must be positive")
        if self.adaptive and not self.adaptive_eta >= 0:
            raise ValueError("adaptive_eta must be non-negative")


def worst_case_perturbation(g, rho, cfg: PerturbConfig, theta_block=None) -> np.ndarray:
    """First-order maximizer of the loss over the rho-ball around the current point.

    Non-adaptive: ``rho * g / |g|``. Adaptive: with ``T = |theta| + eta``
    elementwise, ``rho * T^2 g / |T g|``, so that ``|eps / T| = rho``.
    A gradient whose (transformed) norm is below ``cfg.epsilon_floor`` yields
    the zero vector.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    g = np.asarray(g, dtype=np.float64)
    if cfg.adaptive:
        if theta_block is None:
            raise ValueError("adaptive perturbation needs the parameter block")
        t = np.abs(theta_block) + cfg.adaptive_eta
        tg = t * g
        norm = float(np.linalg.norm(tg))
        if norm < cfg.epsilon_floor:
            return np.zeros_like(g)
        return (rho / norm) * (t * tg)
    norm = float(np.linalg.norm(g))
    if norm < cfg.epsilon_floor:
        return np.zeros_like(g)
    return (rho / norm) * g


def _grad_at(problem, i, theta, block: slice, eps, batch):
    point = theta.copy()
    point[block] += eps
    _, g = task_loss_and_grad(problem, i, point, batch)
    return g


def sam_shared_gradient(problem: MultiTaskProblem, i, theta, eps_sh, batch=None) -> np.ndarray:
    """Gradient of task i w.r.t. the shared block at ``(theta_sh + eps_sh, theta_ns^i)``."""
    sl = problem.partition.shared_slice()
    eps_sh = np.asarray(eps_sh, dtype=np.float64)
    if eps_sh.shape != (sl.stop - sl.start,):
        raise ValueError(f"shared perturbation has shape {eps_sh.shape}, expected {(sl.stop - sl.start,)}")
    return _grad_at(problem, i, theta, sl, eps_sh, batch)[sl]


def sam_nonshared_gradient(problem: MultiTaskProblem, i, theta, eps_ns, batch=None) -> np.ndarray:
    """Gradient of task i w.r.t. its own block at ``(theta_sh, theta_ns^i + eps_ns)``."""
    sl = problem.partition.nonshared_slice(i)
    eps_ns = np.asarray(eps_ns, dtype=np.float64)
    if eps_ns.shape != (sl.stop - sl.start,):
        raise ValueError(
            f"non-shared perturbation has shape {eps_ns.shape}, task {i} block needs {(sl.stop - sl.start,)}"
        )
    return _grad_at(problem, i, theta, sl, eps_ns, batch)[sl]


def decompose(g_sam_sh, g_loss_sh) -> np.ndarray:
    """Flat component ``g_sam - g_loss``."""
    g_sam_sh = np.asarray(g_sam_sh, dtype=np.float64)
    g_loss_sh = np.asarray(g_loss_sh, dtype=np.float64)
    if g_sam_sh.shape != g_loss_sh.shape:
        raise ValueError(f"length mismatch: {g_sam_sh.shape} vs {g_loss_sh.shape}")
    return g_sam_sh - g_loss_sh


@dataclass
class TaskGradientBundle:
    """Per-task gradient pieces for one step, ordered by task index.

    ``g_sam_sh[i]`` is stored as ``g_loss_sh[i] + g_flat_sh[i]`` so that the
    recomposition holds bitwise; it differs from the raw perturbed gradient by
    rounding only.
    """

    losses: list = field(default_factory=list)
    g_loss_sh: list = field(default_factory=list)
    g_sam_sh: list = field(default_factory=list)
    g_flat_sh: list = field(default_factory=list)
    g_ns: list = field(default_factory=list)
    g_sam_ns: list = field(default_factory=list)
    eps_sh: list = field(default_factory=list)
    eps_ns: list = field(default_factory=list)

    @property
    def task_count(self):
        return len(self.losses)

    def to_dict(self):
        return {k: [np.asarray(v).tolist() for v in getattr(self, k)] for k in self.__dataclass_fields__}


def _batch_for(batches, i):
    if isinstance(batches, (list, tuple)):
        return batches[i]
    return batches


def _task_pieces(problem, i, theta, batch, cfg: PerturbConfig | None):
    p = problem.partition
    sh, ns = p.shared_slice(), p.nonshared_slice(i)
    loss, g = task_loss_and_grad(problem, i, theta, batch)
    g_sh = g[sh].copy()
    g_ns = g[ns].copy()
    if cfg is None:
        zeros_sh = np.zeros_like(g_sh)
        return loss, g_sh, g_sh, zeros_sh, g_ns, g_ns, zeros_sh, np.zeros_like(g_ns)
    eps_sh = worst_case_perturbation(g_sh, cfg.rho_sh, cfg, theta[sh])
    eps_ns = worst_case_perturbation(g_ns, cfg.rho_ns, cfg, theta[ns])
    if cfg.joint:
        point = theta.copy()
        point[sh] += eps_sh
        point[ns] += eps_ns
        _, gp = task_loss_and_grad(problem, i, point, batch)
        raw_sam_sh, g_sam_ns = gp[sh], gp[ns]
    else:
        raw_sam_sh = sam_shared_gradient(problem, i, theta, eps_sh, batch)
        g_sam_ns = sam_nonshared_gradient(problem, i, theta, eps_ns, batch)
    g_flat = decompose(raw_sam_sh, g_sh)
    g_sam_sh = g_sh + g_flat
    return loss, g_sh, g_sam_sh, g_flat, g_ns, g_sam_ns, eps_sh, eps_ns


def compute_bundle(problem: MultiTaskProblem, theta, batches, cfg: PerturbConfig | None,
                   workers: int = 1) -> TaskGradientBundle:
    """Run the per-task part of one step for every task.

    ``batches`` is one batch shared by all tasks or a sequence with one batch
    per task. ``cfg=None`` skips perturbation entirely: the SAM fields then
    alias the plain gradients and the flat components are zero.
    """
    theta = np.asarray(theta, dtype=np.float64)
    problem.partition.check(theta)
    if cfg is not None and not isinstance(cfg, PerturbConfig):
        raise TypeError("cfg must be a PerturbConfig or None")
    m = problem.task_count

    def run(i):
        return _task_pieces(problem, i, theta, _batch_for(batches, i), cfg)

    if workers > 1 and m > 1:
        with ThreadPoolExecutor(max_workers=min(workers, m)) as pool:
            results = list(pool.map(run, range(m)))
    else:
        results = [run(i) for i in range(m)]
    bundle = TaskGradientBundle()
    for loss, g_sh, g_sam_sh, g_flat, g_ns, g_sam_ns, eps_sh, eps_ns in results:
        bundle.losses.append(loss)
        bundle.g_loss_sh.append(g_sh)
        bundle.g_sam_sh.append(g_sam_sh)
        bundle.g_flat_sh.append(g_flat)
        bundle.g_ns.append(g_ns)
        bundle.g_sam_ns.append(g_sam_ns)
        bundle.eps_sh.append(eps_sh)
        bundle.eps_ns.append(eps_ns)
    for arr in bundle.g_sam_sh + bundle.g_sam_ns:
        if not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite SAM gradient")
    return bundle
