"""Command-line experiment harness.

`mpinfer run` executes one experiment for a grid of (method, K, seed)
jobs and writes one CSV per (method, K) plus a summary CSV of per-combo
means and standard errors over seeds. `mpinfer verify` runs the named
oracle/invariant suite and reports one pass/fail line per check.

Config files are flat key=value text (one per line, '#' comments);
command-line flags override file values. Output CSVs are byte-identical
across reruns of the same config; wall-clock rows are opt-in via
--timings because timing can never be reproducible.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .errors import MpinferError

RUN_METHODS = (
    "mp-rws", "global-rws", "mp-vi-eval", "tmc-vi-eval", "global-iwae-eval", "smc-eval",
)
EVAL_METHODS = {
    "mp-vi-eval": "mp",
    "tmc-vi-eval": "tmc",
    "global-iwae-eval": "global",
    "smc-eval": "smc",
}
EXPERIMENTS = ("ts-single", "ts-multi", "movielens", "bus")
VERIFY_SUITES = ("unbiasedness", "equivalence", "gradients", "bounds", "complexity")

CSV_HEADER = "method,K,seed,iteration,metric,value"

_DEFAULTS = {
    "experiment": None,
    "method": None,
    "K": "10",
    "iters": 1000,
    "seeds": "1",
    "lr": 1e-3,
    "out": "results",
    "parallel-seeds": 1,
    "eval-every": 100,
    "eval-draws": 100,
    "timings": False,
    "N": 30,
    "tau": 10.0,
    "users": 50,
    "films-per-user": 5,
    "years": 3,
    "boroughs": 3,
    "ids": 30,
    "data": None,
    "test-data": None,
    "data-seed": 0,
    "split-seed": 0,
}
_INT_KEYS = {"iters", "parallel-seeds", "eval-every", "eval-draws", "N", "users",
             "films-per-user", "years", "boroughs", "ids", "data-seed", "split-seed"}
_FLOAT_KEYS = {"lr", "tau"}
_BOOL_KEYS = {"timings"}


class UsageError(Exception):
    pass


def _coerce(key: str, value):
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key in _BOOL_KEYS:
        if isinstance(value, bool):
            return value
        return str(value).lower() in ("1", "true", "yes", "on")
    return value


def load_config(path: str) -> dict:
    opts = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}: line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _DEFAULTS:
                raise UsageError(
                    f"{path}: line {lineno}: unknown key {key!r}; "
                    f"valid keys: {', '.join(sorted(_DEFAULTS))}"
                )
            opts[key] = _coerce(key, value)
    return opts


def parse_seeds(spec: str, base: int) -> list[int]:
    """A bare integer is a count (seeds base..base+n-1); a comma list is
    taken literally."""
    spec = str(spec)
    if "," in spec:
        return [int(s) for s in spec.split(",") if s.strip() != ""]
    return [base + i for i in range(int(spec))]


def parse_k_list(spec: str) -> list[int]:
    ks = [int(s) for s in str(spec).split(",") if s.strip() != ""]
    if not ks or any(k < 1 for k in ks):
        raise UsageError("--K must be a comma list of integers >= 1")
    return ks


def _fmt(value: float) -> str:
    return repr(float(value))


def _run_job(opts: dict, method: str, K: int, seed: int) -> list[tuple]:
    """One (method, K, seed) job; returns CSV rows. Runs in a worker."""
    from .experiments import (
        make_experiment,
        predictive_log_likelihood,
        predictive_log_likelihood_global,
    )
    from .training import TrainConfig, train
    from .verify import draws_for_method

    exp = make_experiment(opts["experiment"], opts)
    rows = []
    if method in EVAL_METHODS:
        rng = np.random.default_rng(seed)
        draws = draws_for_method(
            exp.model, exp.proposal, exp.train_data, EVAL_METHODS[method], K,
            opts["eval-draws"], rng,
        )
        for i, v in enumerate(draws):
            rows.append((method, K, seed, i, "log-phat", float(v)))
        return rows

    test = exp.test_data
    if method == "mp-rws":
        eval_fn = None if test is None else (
            lambda m, q, batch, fs: predictive_log_likelihood(m, q, batch, fs, test)
        )
    else:
        eval_fn = None if test is None else (
            lambda m, q, batch, fs: predictive_log_likelihood_global(
                m, q, batch, exp.train_data, test)
        )
    config = TrainConfig(
        method=method, K=K, iters=opts["iters"], seed=seed,
        eval_every=opts["eval-every"], lr=opts["lr"], eval_fn=eval_fn,
    )
    trace = train(exp.model, exp.proposal, exp.train_data, config)
    cadence = opts["eval-every"]
    for rec in trace.records:
        it = rec["iteration"]
        last = it == opts["iters"] - 1
        if (it + 1) % cadence == 0 or last:
            rows.append((method, K, seed, it, "log-phat", rec["log_phat"]))
            if rec.get("pred_ll") is not None:
                rows.append((method, K, seed, it, "pred-ll", rec["pred_ll"]))
            if opts["timings"]:
                rows.append((method, K, seed, it, "iter-seconds", rec["seconds"]))
    return rows


def _summarize(rows_by_combo: dict) -> list[tuple]:
    """Per-(method, K): mean and standard error over seeds.

    Eval methods summarise per-seed mean log-phat; training methods
    summarise the final-iteration value of each metric.
    """
    out = []
    for (method, K), rows in sorted(rows_by_combo.items()):
        metrics = sorted({r[4] for r in rows if r[4] != "iter-seconds"})
        for metric in metrics:
            per_seed = {}
            for (_, _, seed, it, met, value) in rows:
                if met != metric:
                    continue
                per_seed.setdefault(seed, []).append((it, value))
            if method in EVAL_METHODS:
                vals = [float(np.mean([v for _, v in sorted(items)]))
                        for seed, items in sorted(per_seed.items())]
            else:
                vals = [sorted(items)[-1][1] for seed, items in sorted(per_seed.items())]
            n = len(vals)
            mean = float(np.mean(vals))
            se = float(np.std(vals, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
            out.append((method, K, metric, mean, se, n))
    return out


def cmd_run(args) -> int:
    opts = dict(_DEFAULTS)
    if args.config:
        opts.update(load_config(args.config))
    for key in _DEFAULTS:
        attr = key.replace("-", "_")
        val = getattr(args, attr, None)
        if val is not None:
            opts[key] = _coerce(key, val)
    if opts["experiment"] not in EXPERIMENTS:
        raise UsageError(
            f"unknown experiment {opts['experiment']!r}; valid: {', '.join(EXPERIMENTS)}"
        )
    if opts["method"] not in RUN_METHODS:
        raise UsageError(
            f"unknown method {opts['method']!r}; valid: {', '.join(RUN_METHODS)}"
        )
    ks = parse_k_list(opts["K"])
    base_seed = int(os.environ.get("MPINFER_SEED", "0"))
    seeds = parse_seeds(opts["seeds"], base_seed)
    if not seeds:
        raise UsageError("at least one seed is required")
    method = opts["method"]

    jobs = [(method, K, seed) for K in ks for seed in seeds]
    results: dict = {}
    failures = []
    if opts["parallel-seeds"] > 1:
        with ProcessPoolExecutor(max_workers=opts["parallel-seeds"]) as pool:
            futures = {pool.submit(_run_job, opts, *job): job for job in jobs}
            for fut, job in futures.items():
                try:
                    results[job] = fut.result()
                except Exception as exc:  # noqa: BLE001 - report and fail the run
                    failures.append((job, exc))
    else:
        for job in jobs:
            try:
                results[job] = _run_job(opts, *job)
            except Exception as exc:  # noqa: BLE001
                failures.append((job, exc))

    os.makedirs(opts["out"], exist_ok=True)
    rows_by_combo: dict = {}
    for (m_, K, seed), rows in sorted(results.items()):
        rows_by_combo.setdefault((m_, K), []).extend(rows)
    for (m_, K), rows in sorted(rows_by_combo.items()):
        rows = sorted(rows, key=lambda r: (r[2], r[3], r[4]))
        path = os.path.join(opts["out"], f"{opts['experiment']}_{m_}_K{K}.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(CSV_HEADER + "\n")
            for method_, K_, seed, it, metric, value in rows:
                fh.write(f"{method_},{K_},{seed},{it},{metric},{_fmt(value)}\n")
    summary = _summarize(rows_by_combo)
    with open(os.path.join(opts["out"], "summary.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("method,K,metric,mean,se,n\n")
        for method_, K, metric, mean, se, n in summary:
            fh.write(f"{method_},{K},{metric},{_fmt(mean)},{_fmt(se)},{n}\n")

    for job, exc in failures:
        print(f"error: job method={job[0]} K={job[1]} seed={job[2]} failed: {exc}",
              file=sys.stderr)
    return 1 if failures else 0


def cmd_verify(args) -> int:
    from .verify import run_suite

    if args.suite not in VERIFY_SUITES:
        raise UsageError(
            f"unknown suite {args.suite!r}; valid: {', '.join(VERIFY_SUITES)}"
        )
    results, ok = run_suite(args.suite)
    for r in results:
        print(r.line())
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpinfer",
        description="massively parallel importance-weighted inference harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment grid and write CSV traces")
    run.add_argument("--config", help="flat key=value config file; flags override")
    run.add_argument("--experiment", help=f"one of {', '.join(EXPERIMENTS)}")
    run.add_argument("--method", help=f"one of {', '.join(RUN_METHODS)}")
    run.add_argument("--K", help="comma list of particle counts")
    run.add_argument("--iters", type=int, help="training iterations")
    run.add_argument("--seeds", help="seed count, or comma list of explicit seeds")
    run.add_argument("--lr", type=float, help="base learning rate")
    run.add_argument("--out", help="output directory")
    run.add_argument("--parallel-seeds", type=int, help="worker processes")
    run.add_argument("--eval-every", type=int, help="evaluation cadence (iterations)")
    run.add_argument("--eval-draws", type=int, help="draws per seed for eval methods")
    run.add_argument("--timings", action="store_const", const=True, default=None,
                     help="emit wall-clock iter-seconds rows (non-reproducible)")
    run.add_argument("--N", type=int, help="timeseries length")
    run.add_argument("--tau", type=float, help="timeseries mean-reversion constant")
    run.add_argument("--users", type=int, help="recommender: number of users")
    run.add_argument("--films-per-user", type=int, help="recommender: films per user")
    run.add_argument("--years", type=int, help="bus: number of years")
    run.add_argument("--boroughs", type=int, help="bus: number of boroughs")
    run.add_argument("--ids", type=int, help="bus: ids per borough")
    run.add_argument("--data", help="path to a ratings/delays data file")
    run.add_argument("--test-data", help="path to a held-out data file")
    run.add_argument("--data-seed", type=int, help="synthetic data seed")
    run.add_argument("--split-seed", type=int, help="train/test split seed")
    ver = sub.add_parser("verify", help="run an oracle/invariant suite")
    ver.add_argument("suite", help=f"one of {', '.join(VERIFY_SUITES)}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_verify(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except MpinferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
