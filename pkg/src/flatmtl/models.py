"""Multi-task differentiable problems with per-task loss and gradient at any point.

Each problem owns a :class:`~flatmtl.params.ParamPartition`. Task ``i`` reads
the shared block and its own non-shared block only, so ``grad(i, ...)`` is
exactly zero on every other task's block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import DataError, NumericalError
from .params import ParamPartition


@dataclass(frozen=True)
class Batch:
    """Inputs (N x features) and one label array per task."""

    inputs: np.ndarray
    labels: tuple[np.ndarray, ...]

    def __post_init__(self):
        n = self.inputs.shape[0]
        for i, y in enumerate(self.labels):
            if y.shape[0] != n:
                raise DataError(f"task {i} has {y.shape[0]} labels for {n} inputs")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], tuple(y[idx] for y in self.labels))


class MultiTaskProblem:
    """Interface: per-task loss/gradient over a flat parameter vector.

    Subclasses implement ``loss_and_grad``. ``metric_name`` says what
    ``evaluate`` reports per task ("loss" or "accuracy").
    """

    partition: ParamPartition
    metric_name = "loss"
    higher_is_better = False

    @property
    def task_count(self) -> int:
        return self.partition.task_count

    @property
    def dim(self) -> int:
        return self.partition.size

    def loss_and_grad(self, i: int, theta: np.ndarray, batch: Batch | None = None):
        raise NotImplementedError

    def loss(self, i: int, theta: np.ndarray, batch: Batch | None = None) -> float:
        return self.loss_and_grad(i, theta, batch)[0]

    def grad(self, i: int, theta: np.ndarray, batch: Batch | None = None) -> np.ndarray:
        return self.loss_and_grad(i, theta, batch)[1]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, theta: np.ndarray, batch: Batch | None = None) -> list[float]:
        return [self.loss(i, theta, batch) for i in range(self.task_count)]

    def describe(self) -> dict:
        return {"type": type(self).__name__, "tasks": self.task_count, "dim": self.dim}


def _check_args(problem: MultiTaskProblem, i: int, theta: np.ndarray) -> None:
    if not 0 <= i < problem.task_count:
        raise IndexError(f"task index {i} out of range for {problem.task_count} tasks")
    problem.partition.check(theta)


def task_loss(problem: MultiTaskProblem, i: int, theta: np.ndarray, batch: Batch | None = None) -> float:
    _check_args(problem, i, theta)
    value = problem.loss(i, theta, batch)
    if not math.isfinite(value):
        raise NumericalError(f"task {i} loss is non-finite")
    return value


def task_grad(problem: MultiTaskProblem, i: int, theta: np.ndarray, batch: Batch | None = None) -> np.ndarray:
    _check_args(problem, i, theta)
    g = problem.grad(i, theta, batch)
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"task {i} gradient is non-finite")
    return g


def task_loss_and_grad(problem, i, theta, batch=None):
    _check_args(problem, i, theta)
    value, g = problem.loss_and_grad(i, theta, batch)
    if not math.isfinite(value) or not np.all(np.isfinite(g)):
        raise NumericalError(f"task {i} loss or gradient is non-finite")
    return value, g


class QuadraticProblem(MultiTaskProblem):
    """Task i: ``0.5 (u - c_i)^T A_i (u - c_i) + floor_i`` with ``u = [theta_sh, theta_ns^i]``."""

    def __init__(self, matrices, partition: ParamPartition, centers=None, floors=None):
        self.partition = partition
        m = partition.task_count
        if len(matrices) != m:
            raise ValueError(f"need {m} matrices, got {len(matrices)}")
        self.matrices = []
        for i, A in enumerate(matrices):
            A = np.asarray(A, dtype=np.float64)
            n = partition.shared_size + partition.nonshared_size(i)
            if A.shape != (n, n):
                raise ValueError(f"matrix {i} has shape {A.shape}, expected {(n, n)}")
            self.matrices.append(0.5 * (A + A.T))
        if centers is None:
            centers = [np.zeros(A.shape[0]) for A in self.matrices]
        self.centers = [np.asarray(c, dtype=np.float64) for c in centers]
        self.floors = list(floors) if floors is not None else [0.0] * m

    @classmethod
    def isotropic(cls, shared_size: int, nonshared_sizes: Sequence[int], scale: float = 1.0):
        """``0.5 * scale * ||u||^2`` for every task."""
        p = ParamPartition.from_sizes(shared_size, nonshared_sizes)
        mats = [scale * np.eye(shared_size + n) for n in nonshared_sizes]
        return cls(mats, p)

    def _local(self, i, theta):
        p = self.partition
        return np.concatenate([theta[p.shared_slice()], theta[p.nonshared_slice(i)]])

    def loss_and_grad(self, i, theta, batch=None):
        u = self._local(i, theta) - self.centers[i]
        Au = self.matrices[i] @ u
        value = 0.5 * float(u @ Au) + self.floors[i]
        g = np.zeros(theta.shape[0])
        p = self.partition
        k = p.shared_size
        g[p.shared_slice()] = Au[:k]
        g[p.nonshared_slice(i)] = Au[k:]
        return value, g

    def hessian(self, i, theta=None):
        p = self.partition
        order = np.concatenate([np.arange(*p.shared), np.arange(*p.nonshared[i])])
        H = np.zeros((p.size, p.size))
        H[np.ix_(order, order)] = self.matrices[i]
        return H

    def init_params(self, rng):
        return rng.standard_normal(self.dim)


class AnalyticTwoValleyProblem(MultiTaskProblem):
    """Two-task surrogate with a wide and a narrow valley along a shared valley floor.

    The shared block is ``[x, y]`` with ``x`` of length ``dim - 1``. Task ``i``
    has loss

        a(y)/2 * |x - o_i|^2 + V(y) + b/2 * z_i^2 + floor

    where ``z_i`` is the task's one-coordinate non-shared block,
    ``o_i = task_offsets[i] * e_1``, ``a(y) = aw + (an - aw) (y / s)^2`` and
    ``V(y) = h (y (y - s))^2 / (s/2)^4`` is a double well of barrier height
    ``h`` at ``y = s/2``. The wide valley sits at ``y = 0`` (curvature ``aw``
    across the floor), the narrow one at ``y = s`` (curvature ``an``). Both are
    strict local minima with loss ``floor``. Plain gradient descent stays in the
    well it starts in; the sharpness term ``rho^2/2 * a(y)`` that a perturbed
    gradient picks up tilts the floor toward the wide end.
    """

    def __init__(
        self,
        dim: int = 2,
        wide_curvature: float = 1.0,
        narrow_curvature: float = 50.0,
        separation: float = 2.0,
        barrier: float = 0.25,
        task_offsets: Sequence[float] = (0.05, -0.05),
        ns_curvature: float = 1.0,
        floor: float = 0.0,
        init: str = "narrow_boundary",
    ):
        if dim < 2:
            raise ValueError("the shared block needs dim >= 2")
        if not narrow_curvature > wide_curvature > 0:
            raise ValueError("need narrow_curvature > wide_curvature > 0")
        if not (separation > 0 and barrier > 0 and ns_curvature > 0):
            raise ValueError("separation, barrier and ns_curvature must be positive")
        if init not in ("narrow_boundary", "uniform"):
            raise ValueError(f"unknown init mode {init!r}")
        self.dim_shared = int(dim)
        self.aw = float(wide_curvature)
        self.an = float(narrow_curvature)
        self.separation = float(separation)
        self.barrier = float(barrier)
        self.task_offsets = tuple(float(o) for o in task_offsets)
        self.b = float(ns_curvature)
        self.floor = float(floor)
        self.init = init
        self.partition = ParamPartition.from_sizes(self.dim_shared, [1] * len(self.task_offsets))
        self.x_centers = []
        for off in self.task_offsets:
            c = np.zeros(self.dim_shared - 1)
            c[0] = off
            self.x_centers.append(c)

    @property
    def ridge_distance(self) -> float:
        """Distance along the floor from the narrow valley to the top of the barrier."""
        return 0.5 * self.separation

    def loss_and_grad(self, i, theta, batch=None):
        p = self.partition
        v = theta[p.shared_slice()]
        z = theta[p.nonshared_slice(i)]
        val, gv = kernels.two_valley_value_grad(v, self.x_centers[i], self.aw, self.an, self.separation,
                                                self.barrier)
        g = np.zeros(theta.shape[0])
        g[p.shared_slice()] = gv
        g[p.nonshared_slice(i)] = self.b * z
        return self.floor + val + 0.5 * self.b * float(z @ z), g

    def hessian(self, i, theta):
        """Analytic Hessian of task i's loss (full-vector layout)."""
        p = self.partition
        v = theta[p.shared_slice()]
        u = v[:-1] - self.x_centers[i]
        y = float(v[-1])
        s = self.separation
        a = self.aw + (self.an - self.aw) * (y / s) ** 2
        da = 2.0 * (self.an - self.aw) * y / s**2
        dda = 2.0 * (self.an - self.aw) / s**2
        c = self.barrier / (0.5 * s) ** 4
        q = y * (y - s)
        d = self.dim_shared
        Hs = np.zeros((d, d))
        Hs[:-1, :-1] = a * np.eye(d - 1)
        Hs[:-1, -1] = Hs[-1, :-1] = da * u
        Hs[-1, -1] = 0.5 * dda * float(u @ u) + 2.0 * c * ((2.0 * y - s) ** 2 + 2.0 * q)
        H = np.zeros((p.size, p.size))
        H[p.shared_slice(), p.shared_slice()] = Hs
        ns = p.nonshared_slice(i)
        H[ns, ns] = self.b * np.eye(ns.stop - ns.start)
        return H

    def valley_point(self, which: str, i: int | None = None) -> np.ndarray:
        """Full parameter vector at a valley bottom (task ``i``'s, or between the tasks' bottoms)."""
        if which not in ("wide", "narrow"):
            raise ValueError("which must be 'wide' or 'narrow'")
        theta = np.zeros(self.dim)
        sh = self.partition.shared_slice()
        theta[sh][:-1] = self.x_centers[i] if i is not None else np.mean(self.x_centers, axis=0)
        theta[sh.stop - 1] = 0.0 if which == "wide" else self.separation
        return theta

    def valley_curvatures(self) -> dict:
        """Largest Hessian eigenvalue at each valley bottom, non-shared block included."""
        floor_curv = 32.0 * self.barrier / self.separation**2
        return {"wide": max(self.aw, floor_curv, self.b), "narrow": max(self.an, floor_curv, self.b)}

    def analytic_sharpness(self, rho: float) -> dict:
        """Leading-order rho-sharpness at each valley bottom: ``rho^2/2`` times the top curvature."""
        k = self.valley_curvatures()
        wide = 0.5 * rho**2 * k["wide"]
        narrow = 0.5 * rho**2 * k["narrow"]
        return {"wide": wide, "narrow": narrow, "midpoint": 0.5 * (wide + narrow)}

    def which_valley(self, theta, tol: float | None = None) -> str:
        """``"wide"`` or ``"narrow"`` if the shared block is within ``tol`` of that bottom, else ``"neither"``."""
        tol = 0.25 * self.separation if tol is None else tol
        v = theta[self.partition.shared_slice()]
        xc = np.mean(self.x_centers, axis=0)
        for name, y0 in (("wide", 0.0), ("narrow", self.separation)):
            if math.hypot(float(np.linalg.norm(v[:-1] - xc)), float(v[-1]) - y0) < tol:
                return name
        return "neither"

    def init_params(self, rng):
        theta = np.zeros(self.dim)
        sh = self.partition.shared_slice()
        v = np.zeros(self.dim_shared)
        if self.init == "narrow_boundary":
            # on the narrow side of the barrier, 10-50% of the way from the barrier to the bottom
            frac = rng.uniform(0.5, 0.9)
            v[-1] = self.separation - frac * self.ridge_distance
            v[:-1] = 0.1 * rng.standard_normal(self.dim_shared - 1)
        else:
            v[-1] = rng.uniform(-0.25 * self.separation, 1.25 * self.separation)
            v[:-1] = rng.uniform(-1.0, 1.0, size=self.dim_shared - 1)
        theta[sh] = v
        for i in range(self.task_count):
            theta[self.partition.nonshared_slice(i)] = 0.1 * rng.standard_normal(1)
        return theta

    def describe(self):
        d = super().describe()
        d.update(wide_curvature=self.aw, narrow_curvature=self.an, separation=self.separation,
                 barrier=self.barrier, task_offsets=list(self.task_offsets), ns_curvature=self.b,
                 floor=self.floor, init=self.init)
        return d


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class MlpProblem(MultiTaskProblem):
    """tanh MLP trunk (shared block) with one linear head per task (non-shared blocks).

    Layout of the flat vector: trunk layers ``W1, b1, W2, b2, ...`` (W stored
    row-major as ``fan_in x fan_out``), then each head's ``W, b``. Classification
    heads use mean cross-entropy over the batch; regression heads
    (``loss_kinds[i] == "mse"``) use mean squared error.
    """

    metric_name = "accuracy"
    higher_is_better = True

    def __init__(self, input_dim: int, hidden: Sequence[int], task_outputs: Sequence[int], loss_kinds=None):
        if not hidden:
            raise ValueError("MLP needs at least one hidden layer in the shared trunk")
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.task_outputs = tuple(int(c) for c in task_outputs)
        self.loss_kinds = tuple(loss_kinds or ["ce"] * len(self.task_outputs))
        sizes = (self.input_dim, *self.hidden)
        self._trunk_shapes = [(a, b) for a, b in zip(sizes, sizes[1:])]
        trunk = sum(a * b + b for a, b in self._trunk_shapes)
        heads = [self.hidden[-1] * c + c for c in self.task_outputs]
        self.partition = ParamPartition.from_sizes(trunk, heads)

    def _trunk_params(self, theta):
        out, pos = [], 0
        for a, b in self._trunk_shapes:
            W = theta[pos:pos + a * b].reshape(a, b)
            pos += a * b
            out.append((W, theta[pos:pos + b]))
            pos += b
        return out

    def layer_blocks(self) -> list:
        """One slice per weight matrix and per bias vector, trunk first, then heads."""
        out, pos = [], 0
        for a, b in self._trunk_shapes:
            out += [slice(pos, pos + a * b), slice(pos + a * b, pos + a * b + b)]
            pos += a * b + b
        h = self.hidden[-1]
        for i, c in enumerate(self.task_outputs):
            start = self.partition.nonshared[i][0]
            out += [slice(start, start + h * c), slice(start + h * c, start + h * c + c)]
        return out

    def _head_params(self, theta, i):
        sl = self.partition.nonshared_slice(i)
        h, c = self.hidden[-1], self.task_outputs[i]
        block = theta[sl]
        return block[:h * c].reshape(h, c), block[h * c:]

    def _forward_trunk(self, theta, X):
        acts = [X]
        for W, b in self._trunk_params(theta):
            acts.append(np.tanh(acts[-1] @ W + b))
        return acts

    def logits(self, i, theta, X):
        W, b = self._head_params(theta, i)
        return self._forward_trunk(theta, X)[-1] @ W + b

    def predict_proba(self, i, theta, X):
        return np.exp(_log_softmax(self.logits(i, theta, X)))

    def loss_and_grad(self, i, theta, batch):
        X, y = batch.inputs, batch.labels[i]
        n = X.shape[0]
        acts = self._forward_trunk(theta, X)
        Wh, bh = self._head_params(theta, i)
        z = acts[-1] @ Wh + bh
        if self.loss_kinds[i] == "ce":
            logp = _log_softmax(z)
            value = -float(logp[np.arange(n), y].mean())
            dz = np.exp(logp)
            dz[np.arange(n), y] -= 1.0
            dz /= n
        else:
            target = y.reshape(n, -1)
            r = z - target
            value = float((r * r).sum() / n)
            dz = 2.0 * r / n
        g = np.zeros(theta.shape[0])
        hs = self.partition.nonshared_slice(i)
        hsz = Wh.size
        g[hs.start:hs.start + hsz] = (acts[-1].T @ dz).ravel()
        g[hs.start + hsz:hs.stop] = dz.sum(axis=0)
        delta = dz @ Wh.T
        params = self._trunk_params(theta)
        offsets = []
        pos = 0
        for a, b in self._trunk_shapes:
            offsets.append(pos)
            pos += a * b + b
        for layer in range(len(params) - 1, -1, -1):
            W, _ = params[layer]
            delta = delta * (1.0 - acts[layer + 1] ** 2)
            off = offsets[layer]
            g[off:off + W.size] = (acts[layer].T @ delta).ravel()
            g[off + W.size:off + W.size + W.shape[1]] = delta.sum(axis=0)
            if layer > 0:
                delta = delta @ W.T
        return value, g

    def init_params(self, rng):
        theta = np.zeros(self.dim)
        pos = 0
        for a, b in self._trunk_shapes:
            theta[pos:pos + a * b] = rng.standard_normal(a * b) / math.sqrt(a)
            pos += a * b + b
        h = self.hidden[-1]
        for i, c in enumerate(self.task_outputs):
            start = self.partition.nonshared[i][0]
            theta[start:start + h * c] = rng.standard_normal(h * c) / math.sqrt(h)
        return theta

    def evaluate(self, theta, batch):
        out = []
        for i in range(self.task_count):
            z = self.logits(i, theta, batch.inputs)
            if self.loss_kinds[i] == "ce":
                out.append(float(np.mean(z.argmax(axis=1) == batch.labels[i])))
            else:
                out.append(-float(((z - batch.labels[i].reshape(z.shape)) ** 2).sum(axis=1).mean()))
        return out

    def describe(self):
        d = super().describe()
        d.update(input_dim=self.input_dim, hidden=list(self.hidden), task_outputs=list(self.task_outputs),
                 loss_kinds=list(self.loss_kinds), activation="tanh")
        return d


def synth_two_task_classification(
    rng: np.random.Generator,
    n: int,
    noise: float,
    n_classes: int = 4,
    input_dim: int = 16,
    correlation: float = 0.5,
    separation: float = 1.0,
) -> tuple[Batch, dict]:
    """Two correlated Gaussian-mixture classification tasks on a shared input.

    Task labels ``y1`` are uniform; ``y2`` copies ``y1`` with probability
    ``correlation`` and is uniform otherwise. The input is
    ``separation * (e_{y1} + e_{K + y2}) + noise * N(0, I)`` padded with
    pure-noise coordinates up to ``input_dim``, then passed through a fixed
    random rotation. With ``noise=0`` both tasks are linearly separable.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    k = n_classes
    if input_dim < 2 * k:
        raise ValueError(f"input_dim must be at least {2 * k}")
    y1 = rng.integers(0, k, size=n)
    copy = rng.random(n) < correlation
    y2 = np.where(copy, y1, rng.integers(0, k, size=n))
    X = np.zeros((n, input_dim))
    X[np.arange(n), y1] = separation
    X[np.arange(n), k + y2] = separation
    X += noise * rng.standard_normal((n, input_dim))
    Q, _ = np.linalg.qr(rng.standard_normal((input_dim, input_dim)))
    X = X @ Q
    meta = {"n": n, "noise": noise, "n_classes": k, "input_dim": input_dim,
            "correlation": correlation, "separation": separation}
    return Batch(X, (y1, y2)), meta
