"""Named benchmark problems, wired with their data for :func:`flatmtl.trainer.train`."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .idx import compose_multitask_pairs, read_idx
from .models import (AnalyticTwoValleyProblem, Batch, MlpProblem, MultiTaskProblem, QuadraticProblem,
                     synth_two_task_classification)
from .params import ParamPartition
from .trainer import DataSource

PROBLEMS = ("two_valley", "synth_classification", "paired_idx", "quadratic_moo")


@dataclass
class Registered:
    problem: MultiTaskProblem
    data: DataSource
    spec: dict


def _take(params: dict, defaults: dict, name: str) -> dict:
    unknown = sorted(set(params) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown parameter(s) for problem {name!r}: {', '.join(unknown)}; "
                          f"accepted: {', '.join(sorted(defaults))}")
    merged = dict(defaults)
    merged.update(params)
    return merged


def _two_valley(p):
    p = _take(p, {"dim": 2, "wide_curvature": 1.0, "narrow_curvature": 50.0, "separation": 2.0, "barrier": 0.25,
                  "task_offsets": [0.05, -0.05], "ns_curvature": 1.0, "floor": 0.0,
                  "init": "narrow_boundary"}, "two_valley")
    return AnalyticTwoValleyProblem(**p), DataSource(), p


def _split(batch: Batch, n_train: int):
    idx = np.arange(len(batch))
    return batch.subset(idx[:n_train]), batch.subset(idx[n_train:])


def _synth(p):
    p = _take(p, {"n_train": 1024, "n_eval": 2048, "noise": 0.3, "n_classes": 4, "input_dim": 16,
                  "correlation": 0.5, "separation": 1.0, "hidden": [64], "data_seed": 0},
              "synth_classification")
    rng = np.random.default_rng(p["data_seed"])
    batch, meta = synth_two_task_classification(rng, p["n_train"] + p["n_eval"], p["noise"], p["n_classes"],
                                                p["input_dim"], p["correlation"], p["separation"])
    train, ev = _split(batch, p["n_train"])
    meta.update(n_train=p["n_train"], n_eval=p["n_eval"], data_seed=p["data_seed"])
    problem = MlpProblem(p["input_dim"], p["hidden"], [p["n_classes"]] * 2)
    return problem, DataSource(train, ev, meta), p


_PAIRED_PATHS = ("images_a", "labels_a")


def _paired(p):
    missing = [k for k in _PAIRED_PATHS if not p.get(k)]
    if missing:
        raise ConfigError("problem 'paired_idx' needs IDX file paths: " + ", ".join(
            ["images_a", "labels_a", "images_b (optional, defaults to images_a)",
             "labels_b (optional, defaults to labels_a)"]) + f"; missing: {', '.join(missing)}")
    p = _take(p, {"images_a": None, "labels_a": None, "images_b": None, "labels_b": None, "n_pairs": 4096,
                  "eval_fraction": 0.2, "canvas": [36, 36], "hidden": [64], "data_seed": 0}, "paired_idx")
    ia, la = read_idx(p["images_a"]), read_idx(p["labels_a"])
    ib = read_idx(p["images_b"]) if p["images_b"] else ia
    lb = read_idx(p["labels_b"]) if p["labels_b"] else la
    ds = compose_multitask_pairs(ia, la, ib, lb, np.random.default_rng(p["data_seed"]), p["n_pairs"],
                                 tuple(p["canvas"]))
    n = len(ds)
    X = ds.images.reshape(n, -1)
    batch = Batch(X, (ds.labels_task1, ds.labels_task2))
    n_eval = int(round(n * p["eval_fraction"]))
    train, ev = _split(batch, n - n_eval)
    classes = [int(max(ds.labels_task1.max(), la.array.max())) + 1, int(max(ds.labels_task2.max(), lb.array.max())) + 1]
    problem = MlpProblem(X.shape[1], p["hidden"], classes)
    meta = dict(ds.meta, data_seed=p["data_seed"], n_train=n - n_eval, n_eval=n_eval)
    return problem, DataSource(train, ev, meta), p


def _quadratic(p):
    p = _take(p, {"matrices": [[[1.0, 0, 0], [0, 4.0, 0], [0, 0, 1.0]],
                               [[4.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]],
                  "shared_size": None, "centers": None, "floors": None}, "quadratic_moo")
    mats = [np.asarray(A, dtype=np.float64) for A in p["matrices"]]
    if not mats or any(A.ndim != 2 or A.shape[0] != A.shape[1] for A in mats):
        raise ConfigError("quadratic_moo matrices must be square")
    shared = p["shared_size"] if p["shared_size"] is not None else min(A.shape[0] for A in mats) - 1
    if shared < 1 or any(A.shape[0] <= shared for A in mats):
        raise ConfigError("each matrix needs room for the shared block plus at least one task-specific coordinate")
    partition = ParamPartition.from_sizes(shared, [A.shape[0] - shared for A in mats])
    p["shared_size"] = shared
    return QuadraticProblem(mats, partition, p["centers"], p["floors"]), DataSource(), p


_BUILDERS = {"two_valley": _two_valley, "synth_classification": _synth, "paired_idx": _paired,
             "quadratic_moo": _quadratic}


def problem_registry(name: str, params: dict | None = None) -> Registered:
    if name not in _BUILDERS:
        raise ConfigError(f"unknown problem {name!r}; expected one of {', '.join(PROBLEMS)}")
    try:
        problem, data, resolved = _BUILDERS[name](copy.deepcopy(params or {}))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, (ConfigError, DataError)):
            raise
        raise ConfigError(f"invalid parameters for problem {name!r}: {exc}") from exc
    return Registered(problem, data, {"name": name, "params": resolved})
