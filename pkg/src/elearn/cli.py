"""Command-line interface: ``benchmark``, ``fit``, ``predict`` and ``diagnose``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .benchmark import METHODS, PRESETS, benchmark, ranking_table
from .dataio import Scenario, read_covariates, read_csv, read_table
from .errors import DataError, InvalidArgumentError, NumericalError
from .forest import ForestParams
from .learners import FitOptions, ITRFit, fit_method, predict_itr

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads(value) -> int:
    if value is None:
        return os.cpu_count() or 1
    return max(1, int(value))


def _add_fit_flags(p):
    p.add_argument("--method", choices=["elearn", "rdlearn", "dlearn", "qlearn"],
                   default="elearn")
    p.add_argument("--variance", choices=["forest", "oracle", "constant"], default="forest")
    p.add_argument("--propensity", choices=["logistic", "forest", "known", "file"],
                   default="logistic")
    p.add_argument("--propensity-file", help="CSV with one probability column per arm")
    p.add_argument("--tf", choices=["linear", "forest", "zero"], default="linear")
    p.add_argument("--basis", choices=["linear", "cubic"], default="linear")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--lam", type=float, default=None,
                   help="fixed penalty; omit to tune by cross-validated IPWE")
    p.add_argument("--scenario", help="scenario JSON (needed for oracle variance or "
                                      "known propensity)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="elearn", description="Individualized treatment rule learning.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    b = sub.add_parser("benchmark", help="run the simulation benchmark")
    b.add_argument("--preset", choices=sorted(PRESETS), default=None)
    b.add_argument("--scenario", help="scenario JSON instead of a preset")
    b.add_argument("--n", type=int, default=1600)
    b.add_argument("--reps", type=int, default=25)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--methods", default=",".join(METHODS))
    b.add_argument("--test-size", type=int, default=10000)
    b.add_argument("--folds", type=int, default=10)
    b.add_argument("--threads", type=int, default=None)
    b.add_argument("--out", default="benchmark-out")

    f = sub.add_parser("fit", help="fit a rule on a CSV dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--arms", type=int, default=None, help="number of arms K")
    _add_fit_flags(f)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--threads", type=int, default=None)
    f.add_argument("--out", required=True, help="model JSON path")

    pr = sub.add_parser("predict", help="recommend arms for new covariates")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)

    d = sub.add_parser("diagnose", help="summarize a saved model")
    d.add_argument("--model", required=True)
    return parser


def _load_scenario(path):
    try:
        return Scenario.from_json(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read scenario {path}: {exc}") from None
    except (ValueError, TypeError, KeyError) as exc:
        raise DataError(f"invalid scenario file {path}: {exc}") from None


def cmd_benchmark(args) -> int:
    if (args.preset is None) == (args.scenario is None):
        raise UsageError("give exactly one of --preset or --scenario")
    if args.preset is not None:
        scenarios = PRESETS[args.preset](args.n)
    else:
        scenarios = [_load_scenario(args.scenario)]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    threads = _threads(args.threads)
    options = FitOptions(folds=args.folds, forest=ForestParams())
    done = [0]
    total = len(scenarios) * args.reps

    def progress(s, r):
        done[0] += 1
        print(f"[{done[0]}/{total}] scenario {s} replication {r}", file=sys.stderr)

    result = benchmark(scenarios, methods, args.reps, args.test_size, args.seed, options,
                       n_jobs=threads, progress=progress)
    csv_path, json_path = result.write(args.out)
    print(ranking_table(result))
    failed = sum(r.failures for r in result.reports)
    print(f"wrote {csv_path} and {json_path}; {failed} failed fit(s)")
    return EXIT_OK


def _read_propensity_file(path, n, K):
    _, table = read_table(path)
    if table.shape != (n, K):
        raise DataError(f"propensity file {path} is {table.shape[0]} x {table.shape[1]}, "
                        f"expected {n} x {K}")
    return table


def cmd_fit(args) -> int:
    data = read_csv(args.data, K=args.arms)
    scenario = _load_scenario(args.scenario) if args.scenario else None
    if args.variance == "oracle" and scenario is None:
        raise UsageError("--variance oracle requires --scenario")
    if args.propensity == "known" and scenario is None:
        raise UsageError("--propensity known requires --scenario")
    prop_matrix = None
    if args.propensity == "file":
        if not args.propensity_file:
            raise UsageError("--propensity file requires --propensity-file")
        prop_matrix = _read_propensity_file(args.propensity_file, data.n, data.K)
    threads = _threads(args.threads)
    options = FitOptions(
        propensity=args.propensity, tf=args.tf, variance=args.variance,
        tune=args.lam is None, lam=0.0 if args.lam is None else args.lam,
        folds=args.folds, degree=3 if args.basis == "cubic" else 1, seed=args.seed,
        forest=ForestParams(seed=args.seed, n_jobs=threads), scenario=scenario,
        propensity_matrix=prop_matrix,
    )
    fit = fit_method(args.method, data, options)
    payload = fit.to_dict()
    payload["n_covariates"] = data.p
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"{fit.method}: lambda={fit.lam:.6g}, K={data.K}, p={data.p}; wrote {args.out}")
    return EXIT_OK


def load_model(path) -> tuple[ITRFit, int]:
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}") from None
    try:
        fit = ITRFit.from_dict(payload)
        p = int(payload["n_covariates"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"model file {path} is malformed: {exc}") from None
    expected = p * fit.model.degree + 1
    if fit.model.B.shape[0] != expected:
        raise DataError(f"model file {path}: coefficient matrix has {fit.model.B.shape[0]} "
                        f"rows, expected {expected} for {p} covariates")
    std = fit.model.standardizer
    if std is not None and std.mean.shape[0] != expected - 1:
        raise DataError(f"model file {path}: standardizer has {std.mean.shape[0]} columns, "
                        f"expected {expected - 1}")
    return fit, p


def cmd_predict(args) -> int:
    fit, p = load_model(args.model)
    X = read_covariates(args.data, p)
    arms = predict_itr(fit, X)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "arm"])
        for i, a in enumerate(arms, start=1):
            w.writerow([i, int(a)])
    print(f"wrote {len(arms)} recommendations to {args.out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    fit, p = load_model(args.model)
    B = fit.model.B
    row_norms = np.linalg.norm(B[1:], axis=1)
    print(f"method: {fit.method}")
    print(f"arms K: {fit.model.coding.K}, covariates p: {p}, basis degree: {fit.model.degree}")
    print(f"lambda: {fit.lam:.6g}")
    print(f"active feature rows: {int(np.sum(row_norms > 0))} of {row_norms.size}")
    for key in ("kkt_violation", "pilot_lambda", "iterations"):
        if key in fit.diagnostics:
            print(f"{key}: {fit.diagnostics[key]}")
    return EXIT_OK


COMMANDS = {"benchmark": cmd_benchmark, "fit": cmd_fit, "predict": cmd_predict,
            "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InvalidArgumentError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
