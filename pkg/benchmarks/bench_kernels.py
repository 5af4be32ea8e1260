"""Time the compiled and numpy kernel backends on the same inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from flatmtl import kernels


def _cases(rng):
    cases = {}
    for m in (3, 8):
        A = rng.standard_normal((m, 64))
        G = A @ A.T
        cases[f"minnorm_fw m={m}"] = ("minnorm_fw", (G, 500, 1e-8))
        cases[f"cagrad_dual m={m}"] = ("cagrad_dual", (G, 0.4, 500, 1e-8))
    for m, n in ((4, 1000), (8, 10000)):
        A = rng.standard_normal((m, n))
        orders = np.array([rng.permutation([j for j in range(m) if j != i]) for i in range(m)], dtype=np.int64)
        cases[f"pcgrad_project m={m} n={n}"] = ("pcgrad_project", (A, orders))
    v = rng.standard_normal(50)
    cases["project_simplex n=50"] = ("project_simplex", (v,))
    x = rng.standard_normal(3)
    cases["two_valley_value_grad dim=3"] = ("two_valley_value_grad", (x, np.zeros(2), 1.0, 50.0, 2.0, 0.25))
    return cases


def run(repeat: int = 5, number: int | None = None) -> dict:
    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    results = {}
    for label, (fn, args) in _cases(rng).items():
        row = {}
        for name, mod in backends.items():
            f = getattr(mod, fn)
            timer = timeit.Timer(lambda: f(*args))
            n = number or max(1, timer.autorange()[0])
            row[name] = min(timer.repeat(repeat=repeat, number=n)) / n * 1e6
        results[label] = row
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    res = run(args.repeat)
    names = sorted({k for row in res.values() for k in row})
    print(f"{'kernel':<34}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'speedup':>10}")
    for label, row in res.items():
        speed = row["python"] / row["cython"] if "cython" in row else float("nan")
        print(f"{label:<34}" + "".join(f"{row[n]:>16.2f}" for n in names) + f"{speed:>10.1f}")
    if "cython" not in names:
        print("compiled backend not available; only the numpy fallback was timed", file=sys.stderr)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(res, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
