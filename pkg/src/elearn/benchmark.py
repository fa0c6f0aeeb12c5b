"""Seeded Monte-Carlo benchmark over simulation scenarios and learners."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .coding import build_coding
from .dataio import (
    Scenario,
    _STREAM_TEST,
    derive_seed,
    make_rng,
    oracle_regret_and_misclass,
    simulate,
)
from .errors import ELearnError, InvalidArgumentError
from .evaluation import EvalReport, ipwe_value
from .learners import FitOptions, fit_method
from .nuisance import estimate_nuisances

METHODS = ("elearn", "elearn-oracle", "rdlearn", "dlearn", "qlearn", "random")
NUISANCE_METHODS = ("elearn", "elearn-oracle", "rdlearn", "dlearn")
_STREAM_RANDOM_RULE = 3

CSV_FIELDS = (
    "scenario", "n", "p", "K", "tf_misspec", "heteroscedastic", "prop_misspec",
    "method", "replication", "seed", "status", "regret", "misclass", "ipwe", "lambda",
    "error",
)


def table2_grid(K: int = 3, n: int = 1600, p: int = 10) -> list[Scenario]:
    """The eight cells: treatment-free x variance x propensity (correct/wrong)."""
    cells = []
    for tf in (False, True):
        for het in (False, True):
            for prop in (False, True):
                cells.append(Scenario(n=n, p=p, K=K, tf_misspec=tf, heteroscedastic=het,
                                      prop_misspec=prop))
    return cells


PRESETS = {
    "table2-k3": lambda n: table2_grid(K=3, n=n),
    "table2-k2": lambda n: table2_grid(K=2, n=n),
}


def random_rule(K: int, seed: int):
    """Uniformly random arms; the same input size always gets the same draw."""
    def rule(X):
        rng = make_rng(seed, _STREAM_RANDOM_RULE)
        return rng.integers(1, K + 1, size=np.asarray(X).shape[0])
    return rule


@dataclass
class BenchmarkResult:
    reports: list
    records: list

    def report_for(self, scenario_index: int, method: str) -> EvalReport:
        for r in self.reports:
            if r.scenario["index"] == scenario_index and r.method == method:
                return r
        raise KeyError((scenario_index, method))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for rec in self.records:
            w.writerow([_fmt(rec[k]) for k in CSV_FIELDS])
        return buf.getvalue()

    def summary(self) -> list:
        return [r.summary() for r in self.reports]

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "report.csv", out / "summary.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(_nan_to_none(self.summary()), indent=2, sort_keys=True)
                             + "\n")
        return csv_path, json_path


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def _describe(scenario: Scenario, index: int) -> dict:
    return {"index": index, "label": scenario.label, "n": scenario.n, "p": scenario.p,
            "K": scenario.K, "tf_misspec": scenario.tf_misspec,
            "heteroscedastic": scenario.heteroscedastic,
            "prop_misspec": scenario.prop_misspec}


def run_replication(scenario: Scenario, index: int, rep: int, methods: Sequence[str],
                    master_seed: int, test_size: int, options: FitOptions) -> list[dict]:
    """Fit every method on one simulated training set; one record per method."""
    seed = derive_seed(master_seed, index, rep)
    sc = scenario.with_seed(seed)
    data = simulate(sc)
    test = simulate(sc, n=test_size, rng=make_rng(seed, _STREAM_TEST))
    opts = replace(options, scenario=sc, seed=seed)
    base = {"scenario": index, "n": sc.n, "p": sc.p, "K": sc.K,
            "tf_misspec": sc.tf_misspec, "heteroscedastic": sc.heteroscedastic,
            "prop_misspec": sc.prop_misspec, "replication": rep, "seed": seed}

    nuisance, nuisance_error = None, None
    if any(m in NUISANCE_METHODS for m in methods):
        try:
            nuisance = estimate_nuisances(
                data, build_coding(sc.K), propensity=opts.propensity, tf=opts.tf,
                folds=opts.folds, seed=seed, forest=opts.forest, scenario=sc,
                config=opts.solver)
        except (ELearnError, np.linalg.LinAlgError) as exc:
            nuisance_error = f"nuisance: {exc}"

    records = []
    for method in methods:
        rec = dict(base, method=method, status="ok", regret=float("nan"),
                   misclass=float("nan"), ipwe=float("nan"), error="")
        rec["lambda"] = float("nan")
        try:
            if method == "random":
                rule = random_rule(sc.K, seed)
            else:
                if method in NUISANCE_METHODS and nuisance is None:
                    raise ELearnError(nuisance_error)
                fit = fit_method(method, data, opts, nuisance)
                rule = fit.decide
                rec["lambda"] = float(fit.lam)
            regret, mis = oracle_regret_and_misclass(sc, rule, test_size,
                                                     rng=make_rng(seed, _STREAM_TEST))
            rec["regret"], rec["misclass"] = regret, mis
            rec["ipwe"] = ipwe_value(test, rule, sc.propensity(test.X))
        except (ELearnError, np.linalg.LinAlgError, ValueError) as exc:
            rec["status"] = "failed"
            rec["error"] = str(exc).replace("\n", " ")
        records.append(rec)
    return records


def benchmark(scenarios: Sequence[Scenario], methods: Sequence[str] = METHODS,
              replications: int = 25, test_size: int = 10000, master_seed: int = 0,
              options: Optional[FitOptions] = None, n_jobs: int = 1,
              progress=None) -> BenchmarkResult:
    """Run every (scenario, method, replication) triple.

    Replication ``r`` of scenario ``s`` uses the seed
    ``derive_seed(master_seed, s, r)`` for its coefficients, training data and
    test set, so results do not depend on ``n_jobs`` or on the method list.
    Failed fits are recorded and counted, not raised.
    """
    if replications < 1:
        raise InvalidArgumentError("replications must be >= 1")
    methods = list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise InvalidArgumentError(f"unknown method(s): {', '.join(unknown)}")
    options = FitOptions() if options is None else options
    tasks = [(s, r) for s in range(len(scenarios)) for r in range(replications)]

    def run(task):
        s, r = task
        out = run_replication(scenarios[s], s, r, methods, master_seed, test_size, options)
        if progress is not None:
            progress(s, r)
        return out

    if n_jobs == 1:
        chunks = [run(t) for t in tasks]
    else:
        from joblib import Parallel, delayed

        chunks = Parallel(n_jobs=n_jobs)(
            delayed(run_replication)(scenarios[s], s, r, methods, master_seed, test_size,
                                     options)
            for s, r in tasks
        )
    records = [rec for chunk in chunks for rec in chunk]

    reports = []
    for s, sc in enumerate(scenarios):
        for m in methods:
            rep = EvalReport(method=m, scenario=_describe(sc, s))
            for rec in records:
                if rec["scenario"] != s or rec["method"] != m:
                    continue
                if rec["status"] == "ok":
                    rep.add(rec["regret"], rec["misclass"], rec["ipwe"])
                else:
                    rep.fail(rec["error"])
            reports.append(rep)
    return BenchmarkResult(reports=reports, records=records)


def ranking_table(result: BenchmarkResult) -> str:
    """Per-scenario methods ordered by mean misclassification."""
    lines = []
    by_scenario: dict = {}
    for r in result.reports:
        by_scenario.setdefault(r.scenario["index"], []).append(r)
    for idx in sorted(by_scenario):
        reps = by_scenario[idx]
        lines.append(f"scenario {idx} [{reps[0].scenario['label']}, "
                     f"n={reps[0].scenario['n']}, K={reps[0].scenario['K']}]")
        rows = [(r.summary(), r) for r in reps]
        rows.sort(key=lambda t: (math.inf if math.isnan(t[0]["misclass_mean"])
                                 else t[0]["misclass_mean"]))
        for rank, (s, r) in enumerate(rows, start=1):
            lines.append(
                f"  {rank}. {r.method:<14} misclass {s['misclass_mean']:.3f} "
                f"(se {s['misclass_se']:.3f})  regret {s['regret_mean']:.3f}  "
                f"reps {s['replications']}  failed {s['failures']}"
            )
    return "\n".join(lines)
