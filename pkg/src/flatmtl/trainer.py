"""One-step update and the epoch loop with CSV/JSON logging and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .aggregators import AggregationMethod, aggregate
from .errors import DivergenceError, NumericalError
from .flatgrad import PerturbConfig, TaskGradientBundle, compute_bundle
from .models import Batch, MultiTaskProblem
from .params import ParamPartition

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "epoch", "task", "loss", "grad_norm", "flat_norm", "lr", "wall_ms"]


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    kind: str = "constant"
    factor: float = 1.0
    every: int = 1

    def __post_init__(self):
        if not self.base_lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.kind not in ("constant", "step"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.kind == "step" and (self.every < 1 or not self.factor > 0):
            raise ValueError("step decay needs every >= 1 and factor > 0")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if schedule.kind == "constant":
        return schedule.base_lr
    return schedule.base_lr * schedule.factor ** (epoch // schedule.every)


@dataclass(frozen=True)
class TrainConfig:
    method: AggregationMethod = field(default_factory=AggregationMethod)
    perturb: PerturbConfig = field(default_factory=lambda: PerturbConfig(0.05, 0.05))
    flat_enabled: bool = True
    lr: float = 0.01
    lr_schedule: str = "constant"
    lr_decay_factor: float = 1.0
    lr_decay_every: int = 1
    epochs: int = 10
    batch_size: int = 64
    steps_per_epoch: int = 1
    seed: int = 0
    eval_every: int = 1
    momentum: float = 0.0
    per_task_batches: bool = False
    sharpness_rhos: tuple = (0.1,)
    checkpoint_path: str | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be at least 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        LrSchedule(self.lr, self.lr_schedule, self.lr_decay_factor, self.lr_decay_every)

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.lr_schedule, self.lr_decay_factor, self.lr_decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sharpness_rhos"] = list(self.sharpness_rhos)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["method"] = AggregationMethod(**d["method"])
        d["perturb"] = PerturbConfig(**d["perturb"])
        d["sharpness_rhos"] = tuple(d.get("sharpness_rhos", (0.1,)))
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    step: int
    epoch: int
    lr: float
    losses: list
    grad_norms: list
    flat_norms: list
    agg_loss_norm: float
    agg_flat_norm: float
    wall_ms: float = 0.0

    def rows(self):
        for i, (loss, gn, fn) in enumerate(zip(self.losses, self.grad_norms, self.flat_norms)):
            yield [self.step, self.epoch, i, loss, gn, fn, self.lr, self.wall_ms]


@dataclass
class StepInfo:
    """Intermediate vectors of one step, kept for inspection and tests."""

    bundle: TaskGradientBundle
    agg_loss: np.ndarray
    agg_flat: np.ndarray | None
    shared_update: np.ndarray


def resolve_threads(default: int | None = None) -> int:
    """Worker count from ``FLATMTL_THREADS``, else ``default`` (or the CPU count)."""
    raw = os.environ.get("FLATMTL_THREADS")
    if raw:
        n = int(raw)
        if n < 1:
            raise ValueError("FLATMTL_THREADS must be >= 1")
        return n
    return default if default is not None else (os.cpu_count() or 1)


def mtl_step(problem: MultiTaskProblem, theta: np.ndarray, batches, config: TrainConfig,
             rng: np.random.Generator | None = None, *, step: int = 0, epoch: int = 0,
             lr: float | None = None, workers: int = 1, velocity: np.ndarray | None = None):
    """One update of the shared and non-shared parameters.

    With flat mode on, the shared block moves along
    ``aggregate(loss parts) + aggregate(flat parts)`` and each non-shared block
    along its own SAM gradient. With flat mode off, plain gradients are used and
    no perturbed point is ever evaluated. ``velocity`` (if momentum is on) is
    updated in place.

    Returns ``(new_theta, record, info)``.
    """
    t0 = time.perf_counter()
    theta = np.asarray(theta, dtype=np.float64)
    p = problem.partition
    p.check(theta)
    lr = config.lr if lr is None else lr
    cfg = config.perturb if config.flat_enabled else None
    try:
        bundle = compute_bundle(problem, theta, batches, cfg, workers=workers)
    except NumericalError as exc:
        raise DivergenceError(f"step {step}: {exc}", {"step": step, "epoch": epoch, "theta": theta.tolist()}) from exc

    agg_loss = aggregate(config.method, bundle.g_loss_sh, rng)
    if config.flat_enabled:
        agg_flat = aggregate(config.method, bundle.g_flat_sh, rng)
        shared_update = agg_loss + agg_flat
        ns_updates = bundle.g_sam_ns
    else:
        agg_flat = None
        shared_update = agg_loss
        ns_updates = bundle.g_ns

    full = np.zeros_like(theta)
    full[p.shared_slice()] = shared_update
    for i, g in enumerate(ns_updates):
        full[p.nonshared_slice(i)] = g
    if config.momentum > 0.0:
        if velocity is None:
            raise ValueError("momentum needs a velocity buffer")
        velocity *= config.momentum
        velocity += full
        full = velocity
    with np.errstate(over="ignore", invalid="ignore"):
        new_theta = theta - lr * full
    if not np.all(np.isfinite(new_theta)):
        dump = {"step": step, "epoch": epoch, "theta": theta.tolist(), "bundle": bundle.to_dict()}
        raise DivergenceError(f"step {step}: non-finite parameter update", dump)

    record = RunRecord(
        step=step,
        epoch=epoch,
        lr=lr,
        losses=[float(v) for v in bundle.losses],
        grad_norms=[float(np.linalg.norm(g)) for g in bundle.g_loss_sh],
        flat_norms=[float(np.linalg.norm(g)) for g in bundle.g_flat_sh],
        agg_loss_norm=float(np.linalg.norm(agg_loss)),
        agg_flat_norm=float(np.linalg.norm(agg_flat)) if agg_flat is not None else 0.0,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )
    return new_theta, record, StepInfo(bundle, agg_loss, agg_flat, shared_update)


class DataSource:
    """Training/eval data and the per-step batch schedule.

    ``train=None`` marks a data-free (analytic) problem: every step receives
    ``None`` and an epoch lasts ``steps_per_epoch`` steps.
    """

    def __init__(self, train: Batch | None = None, eval: Batch | None = None, meta: dict | None = None):
        self.train = train
        self.eval = eval if eval is not None else train
        self.meta = meta or {}

    def epoch_batches(self, config: TrainConfig, m: int, rng: np.random.Generator):
        if self.train is None:
            for _ in range(config.steps_per_epoch):
                yield None
            return
        n = len(self.train)
        bs = min(config.batch_size, n)
        if config.per_task_batches:
            orders = [rng.permutation(n) for _ in range(m)]
            for start in range(0, n, bs):
                yield tuple(self.train.subset(o[start:start + bs]) for o in orders)
        else:
            order = rng.permutation(n)
            for start in range(0, n, bs):
                yield self.train.subset(order[start:start + bs])


def git_rev() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


@dataclass
class TrainResult:
    theta: np.ndarray
    records: list
    summary: dict


def save_checkpoint(path, theta, partition: ParamPartition, config: TrainConfig, *, epoch: int, step: int,
                    rng_states: dict, problem_spec: dict | None = None, velocity=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "partition": partition.to_dict(),
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "epoch": epoch,
        "step": step,
        "rng_states": rng_states,
        "problem": problem_spec,
    }
    arrays = {"theta": theta}
    if velocity is not None:
        arrays["velocity"] = velocity
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> dict:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        meta["theta"] = data["theta"].copy()
        meta["velocity"] = data["velocity"].copy() if "velocity" in data else None
    meta["partition"] = ParamPartition.from_dict(meta["partition"])
    return meta


def _rngs(seed):
    init, shuffle, agg = np.random.SeedSequence(seed).spawn(3)
    return {
        "init": np.random.Generator(np.random.PCG64(init)),
        "shuffle": np.random.Generator(np.random.PCG64(shuffle)),
        "aggregate": np.random.Generator(np.random.PCG64(agg)),
    }


def train(problem: MultiTaskProblem, data: DataSource | None, config: TrainConfig, *, out_dir=None,
          theta0: np.ndarray | None = None, resume=None, problem_spec: dict | None = None,
          workers: int | None = None, baselines: dict | None = None, log_records: bool = True) -> TrainResult:
    """Run ``config.epochs`` epochs of :func:`mtl_step`.

    When ``out_dir`` is given, writes ``log.csv`` (one row per step and task),
    ``summary.json`` and ``checkpoint.npz``. With one worker the numeric output
    is bit-reproducible and the ``wall_ms`` column is written as 0 so that
    ``log.csv`` is byte-identical across runs.
    """
    from .analysis import delta_m, rho_sharpness  # analysis depends on models only

    data = data or DataSource()
    workers = resolve_threads(1) if workers is None else workers
    reproducible = workers == 1
    rngs = _rngs(config.seed)
    start_epoch, step = 0, 0
    velocity = None
    if resume is not None:
        ck = load_checkpoint(resume) if not isinstance(resume, dict) else resume
        theta = ck["theta"].copy()
        start_epoch, step = ck["epoch"], ck["step"]
        for k, state in ck["rng_states"].items():
            rngs[k].bit_generator.state = state
        velocity = ck.get("velocity")
    elif theta0 is not None:
        theta = np.array(theta0, dtype=np.float64)
    else:
        theta = problem.init_params(rngs["init"])
    problem.partition.check(theta)
    if config.momentum > 0.0 and velocity is None:
        velocity = np.zeros_like(theta)

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "log.csv", "a" if resume is not None else "w", encoding="utf-8", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if resume is None:
            writer.writerow(LOG_HEADER)

    records = []
    eval_history = []
    best = None
    m = problem.task_count
    t_start = time.perf_counter()
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at(config.schedule, epoch)
            for batches in data.epoch_batches(config, m, rngs["shuffle"]):
                theta, record, _ = mtl_step(problem, theta, batches, config, rngs["aggregate"], step=step,
                                            epoch=epoch, lr=lr, workers=workers, velocity=velocity)
                if reproducible:
                    record.wall_ms = 0.0
                if log_records:
                    records.append(record)
                if writer is not None:
                    for row in record.rows():
                        writer.writerow([_fmt(v) for v in row])
                step += 1
            if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
                metrics = problem.evaluate(theta, data.eval)
                eval_history.append({"epoch": epoch, "metrics": metrics})
                score = float(np.mean(metrics)) * (1 if problem.higher_is_better else -1)
                if best is None or score > best[0]:
                    best = (score, epoch, metrics)
    finally:
        if fh is not None:
            fh.close()

    final_losses = [float(problem.loss(i, theta, data.train)) for i in range(m)]
    final_metrics = problem.evaluate(theta, data.eval)
    sharp_batch = data.train
    sharpness = {}
    for rho in config.sharpness_rhos:
        reports = [rho_sharpness(problem, i, theta, rho, sharp_batch, rng=np.random.default_rng(0))
                   for i in range(m)]
        sharpness[repr(float(rho))] = [r.sharpness for r in reports]
    dm = None
    if baselines is not None:
        dm = delta_m(final_metrics, baselines["metrics"], baselines["lower_is_better"])
    summary = {
        "config": config.to_dict(),
        "final_losses": final_losses,
        "final_metrics": final_metrics,
        "metric_name": problem.metric_name,
        "best_metrics": {"epoch": best[1], "metrics": best[2]} if best else None,
        "eval_history": eval_history,
        "sharpness": sharpness,
        "delta_m": dm,
        "seed": config.seed,
        "git_rev": git_rev(),
        "problem": problem_spec or problem.describe(),
        "data": data.meta,
        "steps": step,
        "kernel_backend": kernels.BACKEND,
        "notes": {"pcgrad_reduction": "mean", "rng": "numpy.PCG64 via SeedSequence.spawn(3)"},
        "wall_s": time.perf_counter() - t_start,
    }
    if out is not None:
        with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
        ck_path = config.checkpoint_path or (out / "checkpoint.npz")
        save_checkpoint(ck_path, theta, problem.partition, config, epoch=config.epochs, step=step,
                        rng_states={k: r.bit_generator.state for k, r in rngs.items()},
                        problem_spec=problem_spec, velocity=velocity)
    elif config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, theta, problem.partition, config, epoch=config.epochs, step=step,
                        rng_states={k: r.bit_generator.state for k, r in rngs.items()},
                        problem_spec=problem_spec, velocity=velocity)
    if not all(math.isfinite(v) for v in final_losses):
        raise DivergenceError("final losses are non-finite", {"theta": theta.tolist()})
    return TrainResult(theta, records, summary)
