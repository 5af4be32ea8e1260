"""``flatmtl`` command line: train, analyze, compare, datagen.

Exit codes: 0 ok, 2 invalid configuration, 3 numerical failure, 4 I/O.
Failures also print one JSON object on stderr with ``error``, ``message`` and
``exit_code``.

Config files are flat JSON objects whose keys match the long flag names
(dashes become underscores). ``problem_params`` is the only nested value.
Flags override file values, and the merged result is written to
``config.json`` in the run directory and echoed under ``experiment`` in
``summary.json``; either can be passed back through ``--config``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aggregators import METHODS, AggregationMethod
from .errors import ConfigError, DataError, DivergenceError, NumericalError, SolverError
from .flatgrad import PerturbConfig
from .trainer import TrainConfig, load_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

TRAIN_DEFAULTS = {
    "problem": "two_valley",
    "problem_params": {},
    "method": "f-mean",
    "rho": 0.05,
    "rho_ns": None,
    "adaptive": False,
    "adaptive_eta": 0.01,
    "joint": False,
    "lr": 0.01,
    "lr_schedule": "constant",
    "lr_decay_factor": 1.0,
    "lr_decay_every": 1,
    "epochs": 10,
    "batch_size": 64,
    "steps_per_epoch": 1,
    "seed": 0,
    "eval_every": 1,
    "momentum": 0.0,
    "per_task_batches": False,
    "cagrad_c": 0.4,
    "max_iterations": 500,
    "tolerance": 1e-8,
    "sharpness_rhos": [0.1],
    "run_id": None,
    "out": None,
}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def parse_method(name: str):
    """``"f-cagrad"`` -> ``("cagrad", True)``; ``"mgda"`` -> ``("mgda", False)``."""
    flat = name.startswith("f-")
    base = name[2:] if flat else name
    if base not in METHODS:
        raise ConfigError(f"unknown method {name!r}; use one of {', '.join(METHODS)}, optionally prefixed by 'f-'")
    return base, flat


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    if "experiment" in data and "config" in data:
        data = data["experiment"]  # a summary.json
    unknown = sorted(set(data) - set(TRAIN_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return data


def merge_config(file_values: dict, flag_values: dict) -> dict:
    cfg = json.loads(json.dumps(TRAIN_DEFAULTS))
    cfg.update(file_values)
    cfg.update({k: v for k, v in flag_values.items() if v is not None})
    return cfg


def build_train_config(cfg: dict) -> TrainConfig:
    base, flat = parse_method(cfg["method"])
    try:
        method = AggregationMethod(base, float(cfg["cagrad_c"]), int(cfg["max_iterations"]), float(cfg["tolerance"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rho = float(cfg["rho"])
    rho_ns = float(cfg["rho_ns"]) if cfg["rho_ns"] is not None else rho
    try:
        perturb = PerturbConfig(rho, rho_ns, adaptive=bool(cfg["adaptive"]),
                                adaptive_eta=float(cfg["adaptive_eta"]), joint=bool(cfg["joint"]))
        rhos = cfg["sharpness_rhos"]
        if isinstance(rhos, str):
            rhos = _floats(rhos)
        return TrainConfig(
            method=method, perturb=perturb, flat_enabled=flat, lr=float(cfg["lr"]),
            lr_schedule=cfg["lr_schedule"], lr_decay_factor=float(cfg["lr_decay_factor"]),
            lr_decay_every=int(cfg["lr_decay_every"]), epochs=int(cfg["epochs"]),
            batch_size=int(cfg["batch_size"]), steps_per_epoch=int(cfg["steps_per_epoch"]),
            seed=int(cfg["seed"]), eval_every=int(cfg["eval_every"]), momentum=float(cfg["momentum"]),
            per_task_batches=bool(cfg["per_task_batches"]), sharpness_rhos=tuple(float(r) for r in rhos),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def _floats(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} already holds results; pass --force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from exc
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_train(args) -> int:
    from .registry import problem_registry

    file_values = load_config_file(args.config) if args.config else {}
    flags = {
        "problem": args.problem, "method": args.method, "rho": args.rho, "rho_ns": args.rho_ns,
        "adaptive": True if args.adaptive else None, "joint": True if args.joint else None, "lr": args.lr,
        "epochs": args.epochs, "batch_size": args.batch_size, "steps_per_epoch": args.steps_per_epoch,
        "seed": args.seed, "cagrad_c": args.cagrad_c, "momentum": args.momentum, "out": args.out,
        "run_id": args.run_id, "sharpness_rhos": _floats(args.sharpness_rho) if args.sharpness_rho else None,
    }
    if args.problem_params:
        try:
            flags["problem_params"] = json.loads(args.problem_params)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--problem-params is not valid JSON: {exc}") from exc
    cfg = merge_config(file_values, flags)
    tc = build_train_config(cfg)
    if not cfg["out"]:
        raise ConfigError("an output directory is required (--out)")
    reg = problem_registry(cfg["problem"], cfg["problem_params"])
    cfg["problem_params"] = reg.spec["params"]
    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(EXIT_IO, f"cannot read checkpoint {args.resume}: {exc}") from exc
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = _prepare_out(cfg["out"], args.force)
    cfg["run_id"] = cfg["run_id"] or out.name
    _write_json(out / "config.json", cfg)
    try:
        result = train(reg.problem, reg.data, tc, out_dir=out, resume=resume, problem_spec=reg.spec,
                       log_records=False)
    except DivergenceError as exc:
        _write_json(out / "divergence.json", {"message": str(exc), "dump": exc.dump})
        raise
    summary = result.summary
    summary["experiment"] = cfg
    summary["higher_is_better"] = reg.problem.higher_is_better
    _write_json(out / "summary.json", summary)
    print(json.dumps({"run_id": cfg["run_id"], "out": str(out), "final_metrics": summary["final_metrics"],
                      "metric": summary["metric_name"]}))
    return EXIT_OK


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if header:
            w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def cmd_analyze(args) -> int:
    from .analysis import loss_surface_grid, rho_sharpness, robustness_probe
    from .registry import problem_registry

    ck_path = Path(args.checkpoint) if args.checkpoint else (Path(args.run) / "checkpoint.npz" if args.run else None)
    if ck_path is None:
        raise ConfigError("pass --run DIR or --checkpoint FILE")
    try:
        ck = load_checkpoint(ck_path)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {ck_path}: {exc}") from exc
    spec = ck.get("problem")
    if not spec:
        raise ConfigError("checkpoint has no problem description; it was not written by 'flatmtl train'")
    reg = problem_registry(spec["name"], spec["params"])
    problem, data = reg.problem, reg.data
    theta = ck["theta"]
    measures = [m.strip() for m in args.measure.split(",") if m.strip()]
    bad = sorted(set(measures) - {"sharpness", "probe", "surface"})
    if bad:
        raise ConfigError(f"unknown measure(s): {', '.join(bad)}")
    tasks = [args.task] if args.task is not None else list(range(problem.task_count))
    for t in tasks:
        if not 0 <= t < problem.task_count:
            raise ConfigError(f"task {t} out of range for {problem.task_count} tasks")
    out = Path(args.out) if args.out else ck_path.parent / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    run_id = args.run_id or ck_path.parent.name
    report = {"checkpoint": str(ck_path), "run_id": run_id, "problem": spec}
    rng = np.random.default_rng(args.seed)
    if "sharpness" in measures:
        rhos = _floats(args.rho) if args.rho else [0.1]
        rows = []
        for i in tasks:
            for rho in rhos:
                r = rho_sharpness(problem, i, theta, rho, data.train, steps=args.steps, restarts=args.restarts,
                                  rng=np.random.default_rng(args.seed), shared_only=args.shared_only)
                rows.append([i, rho, r.base_loss, r.worst_loss, r.sharpness, r.sam_step_loss, r.evaluations])
        header = ["task", "rho", "base_loss", "worst_loss", "sharpness", "sam_step_loss", "evaluations"]
        _write_rows(out / f"{run_id}_sharpness_all.csv", header, rows)
        report["sharpness"] = [dict(zip(header, r)) for r in rows]
    if "probe" in measures:
        radii = _floats(args.radii) if args.radii else [0.0, 0.1, 0.5, 1.0]
        table = robustness_probe(problem, theta, radii, args.samples, rng, data.eval, shared_only=args.shared_only)
        header = ["radius"] + [f"task{i}_{s}" for i in range(problem.task_count) for s in ("mean", "std")]
        rows = [[r] + [v for pair in zip(mu, sd) for v in pair] for r, mu, sd in table.rows()]
        _write_rows(out / f"{run_id}_probe_all.csv", header, rows)
        report["probe"] = {"metric": table.metric, "radii": table.radii, "mean": table.mean, "std": table.std}
    if "surface" in measures:
        report["surface"] = {}
        for i in tasks:
            grid = loss_surface_grid(problem, i, theta, rng, args.extent, args.resolution, data.train,
                                     filter_norm=not args.plain_directions)
            _write_rows(out / f"{run_id}_surface_{i}.csv", None, grid.values.tolist())
            report["surface"][str(i)] = {"coords": grid.coords.tolist(), "center": float(
                grid.values[args.resolution // 2, args.resolution // 2]) if args.resolution % 2 else None}
    _write_json(out / f"{run_id}_analysis.json", report)
    print(json.dumps({"out": str(out), "measures": measures}))
    return EXIT_OK


def _read_summary(run_dir):
    path = Path(run_dir) / "summary.json"
    try:
        s = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_IO, f"malformed summary {path}: {exc}") from exc
    if not isinstance(s, dict) or not isinstance(s.get("final_metrics"), list):
        raise CliError(EXIT_IO, f"malformed summary {path}: no final_metrics list")
    return s


def method_label(summary) -> str:
    cfg = summary.get("config", {})
    name = cfg.get("method", {}).get("name", "?")
    return ("f-" if cfg.get("flat_enabled") else "") + name


def cmd_compare(args) -> int:
    from .analysis import delta_m

    path = Path(args.baselines)
    if not path.is_file():
        raise ConfigError(f"baselines file {path} not found")
    try:
        base = json.loads(path.read_text(encoding="utf-8"))
        metrics = [float(v) for v in base["metrics"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"baselines file must hold {{\"metrics\": [...], \"lower_is_better\": [...]}}: {exc}") from exc
    rows = []
    for run in args.runs:
        s = _read_summary(run)
        low = base.get("lower_is_better")
        if low is None:
            low = [not s.get("higher_is_better", False)] * len(metrics)
        if len(s["final_metrics"]) != len(metrics) or len(low) != len(metrics):
            raise ConfigError(f"run {run} has {len(s['final_metrics'])} task metrics, baselines have {len(metrics)}")
        dm = delta_m(s["final_metrics"], metrics, [bool(v) for v in low])
        rows.append([str(run), method_label(s), *s["final_metrics"], dm])
    header = ["run", "method"] + [f"task{i}" for i in range(len(metrics))] + ["delta_m_pct"]
    width = max(len(r[0]) for r in rows)
    print(f"{'run':<{width}}  {'method':<9}  " + "  ".join(f"{h:>12}" for h in header[2:]))
    for r in rows:
        print(f"{r[0]:<{width}}  {r[1]:<9}  " + "  ".join(f"{v:>12.6g}" for v in r[2:]))
    if args.out:
        _write_rows(args.out, header, rows)
    return EXIT_OK


def cmd_datagen(args) -> int:
    from .idx import compose_multitask_pairs, read_idx, write_idx

    try:
        ia, la = read_idx(args.images_a), read_idx(args.labels_a)
        ib = read_idx(args.images_b) if args.images_b else ia
        lb = read_idx(args.labels_b) if args.labels_b else la
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    rng = np.random.default_rng(args.seed)
    ds = compose_multitask_pairs(ia, la, ib, lb, rng, args.n_pairs, (args.canvas, args.canvas))
    out = _prepare_out(args.out, args.force)
    if ia.type_code == 0x08 and ib.type_code == 0x08:
        write_idx(out / "images.idx", np.rint(ds.images * 255.0).astype(np.uint8))
    else:
        write_idx(out / "images.idx", ds.images.astype(np.float64))
    write_idx(out / "labels_task1.idx", ds.labels_task1.astype(np.uint8) if ds.labels_task1.max() < 256
              else ds.labels_task1.astype(np.int32))
    write_idx(out / "labels_task2.idx", ds.labels_task2.astype(np.uint8) if ds.labels_task2.max() < 256
              else ds.labels_task2.astype(np.int32))
    _write_json(out / "meta.json", dict(ds.meta, seed=args.seed))
    print(json.dumps({"out": str(out), "n_pairs": len(ds)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flatmtl", description="Flat-region multi-task training and diagnostics.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model and write log.csv, summary.json and checkpoint.npz")
    t.add_argument("--config", help="JSON config file; flags override its values")
    t.add_argument("--problem", help="two_valley | synth_classification | paired_idx | quadratic_moo")
    t.add_argument("--problem-params", help="JSON object of problem parameters")
    t.add_argument("--method", help="mean|mgda|pcgrad|cagrad|imtl, prefix f- for flat mode (e.g. f-cagrad)")
    t.add_argument("--rho", type=float, help="shared-block perturbation radius")
    t.add_argument("--rho-ns", type=float, help="non-shared perturbation radius (default: --rho)")
    t.add_argument("--adaptive", action="store_true", help="scale-invariant perturbations")
    t.add_argument("--joint", action="store_true", help="one perturbed gradient per task instead of two")
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--steps-per-epoch", type=int, help="steps per epoch for data-free problems")
    t.add_argument("--momentum", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--cagrad-c", type=float)
    t.add_argument("--sharpness-rho", help="comma-separated radii reported in summary.json")
    t.add_argument("--out", help="run directory")
    t.add_argument("--run-id")
    t.add_argument("--resume", help="continue from a checkpoint.npz")
    t.add_argument("--force", action="store_true", help="allow writing into a non-empty run directory")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="sharpness, robustness probe and loss-surface measurements")
    a.add_argument("--run", help="run directory holding checkpoint.npz")
    a.add_argument("--checkpoint")
    a.add_argument("--measure", default="sharpness", help="comma-separated: sharpness,probe,surface")
    a.add_argument("--rho", help="comma-separated sharpness radii (default 0.1)")
    a.add_argument("--steps", type=int, default=20, help="ascent steps per start")
    a.add_argument("--restarts", type=int, default=4)
    a.add_argument("--radii", help="comma-separated probe radii")
    a.add_argument("--samples", type=int, default=10, help="probe samples per radius")
    a.add_argument("--extent", type=float, default=1.0)
    a.add_argument("--resolution", type=int, default=21)
    a.add_argument("--plain-directions", action="store_true", help="no filter normalization")
    a.add_argument("--shared-only", action="store_true", help="perturb only the shared block")
    a.add_argument("--task", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.add_argument("--run-id")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("compare", help="tabulate runs and their relative change against single-task baselines")
    c.add_argument("runs", nargs="+")
    c.add_argument("--baselines", required=True, help='JSON: {"metrics": [...], "lower_is_better": [...]}')
    c.add_argument("--out", help="write the table as CSV")
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("datagen", help="compose two-digit images from IDX sources")
    d.add_argument("--images-a", required=True)
    d.add_argument("--labels-a", required=True)
    d.add_argument("--images-b")
    d.add_argument("--labels-b")
    d.add_argument("--n-pairs", type=int, default=1000)
    d.add_argument("--canvas", type=int, default=36)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_datagen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, "io" if exc.code == EXIT_IO else "config", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except DataError as exc:
        return _fail(EXIT_IO, "data", str(exc))
    except (NumericalError, SolverError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))


if __name__ == "__main__":
    sys.exit(main())
