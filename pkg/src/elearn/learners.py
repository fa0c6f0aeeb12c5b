"""End-to-end rule learners.

All learners maximize the outcome; negate ``Y`` for smaller-is-better
problems.  Every fitted rule is a :class:`DecisionModel`, so prediction and
serialization are shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .coding import CodingMatrix, build_coding, coefficients_from_arm_effects, decide
from .dataio import Dataset, Scenario, Standardizer, add_intercept, derive_seed, poly_expand
from .errors import InvalidArgumentError
from .forest import ForestParams
from .nuisance import (
    NuisanceFit,
    estimate_nuisances,
    fit_variance,
    make_folds,
    oracle_variance,
)
from .score import DecisionModel, EfficientEquation, sandwich
from .solver import (
    LeastSquaresProblem,
    SolverConfig,
    cross_validate_path,
    kkt_check,
    null_model,
    solve_penalized,
    tune_by_ipwe,
)

MODEL_FORMAT_VERSION = 1
VARIANCE_MODES = ("forest", "oracle", "constant")


@dataclass
class FitOptions:
    propensity: str = "logistic"  # logistic | forest | known | file
    tf: str = "linear"  # linear | forest | zero
    variance: str = "forest"  # forest | oracle | constant
    tune: bool = True
    lam: float = 0.0  # fixed penalty when tune is False
    folds: int = 10
    degree: int = 1
    grid_size: int = 50
    seed: int = 0
    forest: ForestParams = field(default_factory=ForestParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    scenario: Optional[Scenario] = None
    propensity_matrix: Optional[np.ndarray] = None
    sandwich: bool = False

    def __post_init__(self):
        if self.variance not in VARIANCE_MODES:
            raise InvalidArgumentError(f"unknown variance mode {self.variance!r}")
        if self.degree not in (1, 3):
            raise InvalidArgumentError(f"basis degree must be 1 or 3, got {self.degree}")
        if self.lam < 0:
            raise InvalidArgumentError("lam must be non-negative")
        if self.folds < 2:
            raise InvalidArgumentError("folds must be >= 2")


@dataclass
class ITRFit:
    method: str
    model: DecisionModel
    lam: float
    nuisance: Optional[NuisanceFit] = None
    diagnostics: dict = field(default_factory=dict)
    pilot: Optional[DecisionModel] = None

    @property
    def B(self) -> np.ndarray:
        return self.model.B

    def decide(self, X) -> np.ndarray:
        return self.model.decide(X)

    def effects(self, X) -> np.ndarray:
        return self.model.effects(X)

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "method": self.method,
            "lambda": self.lam,
            "model": self.model.to_dict(),
            "diagnostics": _jsonable(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ITRFit":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise InvalidArgumentError(
                f"unsupported model format version {d.get('format_version')!r}"
            )
        return cls(method=str(d["method"]), model=DecisionModel.from_dict(d["model"]),
                   lam=float(d["lambda"]), diagnostics=dict(d.get("diagnostics", {})))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def predict_itr(fit: ITRFit, X_new) -> np.ndarray:
    """Recommended 1-based arms for each row of ``X_new``."""
    return fit.decide(X_new)


# ---------------------------------------------------------------------------
# Shared machinery
# ---------------------------------------------------------------------------


def _features(X, degree: int):
    Z = poly_expand(X, degree)
    std = Standardizer.fit(Z)
    return add_intercept(std.transform(Z)), std


class RuleProblem:
    """Adapter giving a quadratic problem the hooks used for IPWE tuning."""

    def __init__(self, base, Xt, data: Dataset, prop, coding: CodingMatrix, penalized):
        self.base = base
        self.Xt = Xt
        self.A, self.Y, self.prop = data.A, data.Y, np.asarray(prop, dtype=float)
        self.coding = coding
        self.penalized = np.asarray(penalized, dtype=bool)

    def quadratic(self, idx=None):
        return self.base.quadratic(idx)

    def rule(self, M, idx):
        return decide(self.Xt[idx] @ M, self.coding)

    def solve_direct(self):
        if hasattr(self.base, "solve"):
            return self.base.solve()
        return self.base.solve_direct()


def _solve(problem, options: FitOptions, folds) -> tuple[np.ndarray, float, dict]:
    """Tuned, fixed-penalty or unpenalized solve of ``problem``."""
    config = options.solver
    if options.tune:
        res = tune_by_ipwe(problem, folds, options.grid_size, config)
        M, lam = res.solution, res.lam
        diag = {"lambda_index": res.index, "cv_criterion": res.criteria,
                "lambdas": res.path.lambdas,
                "iterations": int(res.path.n_iter[res.index])}
    elif options.lam == 0:
        M, lam = problem.solve_direct(), 0.0
        diag = {"iterations": 0}
    else:
        quad = problem.quadratic(None)
        r = solve_penalized(quad, options.lam, problem.penalized, config,
                            init=null_model(quad, problem.penalized))
        M, lam = r.x, options.lam
        diag = {"iterations": r.n_iter, "converged": r.converged}
    diag["kkt_violation"] = kkt_check(M, problem.quadratic(None), lam, problem.penalized)
    return M, lam, diag


def _nuisance(data: Dataset, coding, options: FitOptions, nuisance) -> NuisanceFit:
    if nuisance is not None:
        if nuisance.prop.shape != (data.n, data.K):
            raise InvalidArgumentError("supplied nuisance does not match the data")
        return nuisance
    return estimate_nuisances(
        data, coding, propensity=options.propensity, tf=options.tf, folds=options.folds,
        seed=options.seed, forest=options.forest, scenario=options.scenario,
        propensity_matrix=options.propensity_matrix, config=options.solver,
    )


def _tuning_folds(nuis: NuisanceFit, data: Dataset, options: FitOptions):
    folds = nuis.folds
    if folds is None or np.unique(folds).size != options.folds:
        folds = make_folds(data.n, options.folds, options.seed)
    return folds


# ---------------------------------------------------------------------------
# E-Learning and RD-Learning
# ---------------------------------------------------------------------------


def _equation_solve(data, Xt, coding, nuis, sigma2, options, folds):
    eq = EfficientEquation(Xt, data.A, data.Y - nuis.mu0, nuis.prop, sigma2, coding)
    problem = RuleProblem(eq, Xt, data, nuis.prop, coding,
                          options.solver.penalized_rows(Xt.shape[1]))
    M, lam, diag = _solve(problem, options, folds)
    return eq, M, lam, diag


def fit_elearning(data: Dataset, options: FitOptions = FitOptions(),
                  nuisance: Optional[NuisanceFit] = None) -> ITRFit:
    """Three-step E-Learning.

    1. pilot solve of the efficient equation with unit working variance;
    2. working-variance estimate from the pilot residuals (forest), from the
       scenario truths (oracle) or fixed at one (constant);
    3. re-solve with the estimated variance.
    """
    coding = build_coding(data.K)
    Xt, std = _features(data.X, options.degree)
    nuis = _nuisance(data, coding, options, nuisance)
    folds = _tuning_folds(nuis, data, options)

    ones = np.ones((data.n, data.K))
    _, B1, lam1, diag1 = _equation_solve(data, Xt, coding, nuis, ones, options, folds)
    pilot = DecisionModel(B1, coding, std, options.degree)

    if options.variance == "forest":
        params = replace(options.forest, seed=derive_seed(options.seed, 3))
        sigma2 = fit_variance(data, nuis.mu0, pilot, coding, params)
    elif options.variance == "oracle":
        if options.scenario is None:
            raise InvalidArgumentError("oracle variance requires a scenario")
        sigma2 = oracle_variance(options.scenario, data.X, nuis.mu0)
    else:
        sigma2 = ones
    nuis = nuis.with_sigma2(sigma2)

    eq, B, lam, diag = _equation_solve(data, Xt, coding, nuis, sigma2, options, folds)
    diag["pilot_lambda"] = lam1
    diag["pilot_kkt_violation"] = diag1["kkt_violation"]
    if options.sandwich:
        sw = sandwich(eq, B)
        diag["standard_errors"] = sw.standard_errors(data.n).reshape(B.shape, order="F")
    method = "elearn-oracle" if options.variance == "oracle" else "elearn"
    return ITRFit(method=method, model=DecisionModel(B, coding, std, options.degree),
                  lam=lam, nuisance=nuis, diagnostics=diag, pilot=pilot)


def fit_rdlearning(data: Dataset, options: FitOptions = FitOptions(),
                   nuisance: Optional[NuisanceFit] = None) -> ITRFit:
    """Inverse-propensity weighted least squares on the angle-coded residual."""
    coding = build_coding(data.K)
    Xt, std = _features(data.X, options.degree)
    nuis = _nuisance(data, coding, options, nuisance)
    folds = _tuning_folds(nuis, data, options)
    n, d = Xt.shape
    wa = coding.W[data.A - 1]
    Z = coding.scale * (wa[:, :, None] * Xt[:, None, :]).reshape(n, -1)
    w = 1.0 / nuis.prop[np.arange(n), data.A - 1]
    penalized = options.solver.penalized_rows(d)
    ls = LeastSquaresProblem(Z, data.Y - nuis.mu0, w, shape=(d, data.K - 1),
                             penalized=penalized)
    problem = RuleProblem(ls, Xt, data, nuis.prop, coding, penalized)
    B, lam, diag = _solve(problem, options, folds)
    return ITRFit(method="rdlearn", model=DecisionModel(B, coding, std, options.degree),
                  lam=lam, nuisance=nuis, diagnostics=diag)


def fit_dlearning(data: Dataset, options: FitOptions = FitOptions(),
                  nuisance: Optional[NuisanceFit] = None) -> ITRFit:
    """Vectorized weighted least squares of ``K Y w_A`` on the features."""
    coding = build_coding(data.K)
    Xt, std = _features(data.X, options.degree)
    if nuisance is None:
        options_p = replace(options, tf="zero")
        nuis = _nuisance(data, coding, options_p, None)
    else:
        nuis = nuisance
    folds = _tuning_folds(nuis, data, options)
    n, d = Xt.shape
    pa = nuis.prop[np.arange(n), data.A - 1]
    T = data.K * data.Y[:, None] * coding.W[data.A - 1]
    penalized = options.solver.penalized_rows(d)
    ls = LeastSquaresProblem(Xt, T, 1.0 / (data.K * pa), penalized=penalized)
    problem = RuleProblem(ls, Xt, data, nuis.prop, coding, penalized)
    B, lam, diag = _solve(problem, options, folds)
    return ITRFit(method="dlearn", model=DecisionModel(B, coding, std, options.degree),
                  lam=lam, nuisance=nuis, diagnostics=diag)


# ---------------------------------------------------------------------------
# Q-Learning
# ---------------------------------------------------------------------------


def q_design(Xs, A, K) -> np.ndarray:
    """``(1, x, arm dummies, dummies x x)`` with arm 1 as reference."""
    Xs = np.asarray(Xs, dtype=float)
    n, p = Xs.shape
    dummies = np.zeros((n, K - 1))
    rows = np.flatnonzero(np.asarray(A) > 1)
    dummies[rows, np.asarray(A)[rows] - 2] = 1.0
    inter = (dummies[:, :, None] * Xs[:, None, :]).reshape(n, -1)
    return np.hstack([np.ones((n, 1)), Xs, dummies, inter])


def q_arm_contrasts(coef, p: int, K: int) -> np.ndarray:
    """Per-arm linear contrasts relative to arm 1, shape (K, p+1)."""
    coef = np.asarray(coef, dtype=float).ravel()
    delta = np.zeros((K, p + 1))
    delta[1:, 0] = coef[1 + p: 1 + p + K - 1]
    delta[1:, 1:] = coef[1 + p + K - 1:].reshape(K - 1, p)
    return delta


def fit_qlearning(data: Dataset, options: FitOptions = FitOptions()) -> ITRFit:
    """Lasso regression of ``Y`` on main effects, arm dummies and interactions.

    The penalty is chosen by cross-validated squared error (or fixed by
    ``options.lam`` when tuning is off).  The fitted arm contrasts are
    converted to an equivalent angle-based decision model.
    """
    coding = build_coding(data.K)
    Xt, std = _features(data.X, options.degree)
    Xs = Xt[:, 1:]
    Z = q_design(Xs, data.A, data.K)
    penalized = np.ones(Z.shape[1], dtype=bool)
    penalized[0] = False
    ls = LeastSquaresProblem(Z, data.Y, penalized=penalized)
    config = options.solver
    if options.tune:
        folds = make_folds(data.n, options.folds, options.seed)
        res = cross_validate_path(ls, folds, lambda M, idx: -ls.loss(M, idx),
                                  options.grid_size, config)
        coef, lam = res.solution, res.lam
        diag = {"lambda_index": res.index, "cv_criterion": -res.criteria}
    elif options.lam == 0:
        coef, lam = ls.solve_direct(), 0.0
        diag = {}
    else:
        quad = ls.quadratic()
        coef = solve_penalized(quad, options.lam, penalized, config,
                               init=null_model(quad, penalized)).x
        lam = options.lam
        diag = {}
    coef = np.asarray(coef).ravel()
    diag["q_coefficients"] = coef
    delta = q_arm_contrasts(coef, Xs.shape[1], data.K)
    beta = delta - delta.mean(axis=0, keepdims=True)
    B = coefficients_from_arm_effects(beta, coding)
    return ITRFit(method="qlearn", model=DecisionModel(B, coding, std, options.degree),
                  lam=lam, diagnostics=diag)


FITTERS = {
    "elearn": fit_elearning,
    "rdlearn": fit_rdlearning,
    "dlearn": fit_dlearning,
}


def fit_method(method: str, data: Dataset, options: FitOptions = FitOptions(),
               nuisance: Optional[NuisanceFit] = None) -> ITRFit:
    """Dispatch by method tag (``elearn``, ``elearn-oracle``, ``rdlearn``,
    ``dlearn``, ``qlearn``)."""
    if method == "qlearn":
        return fit_qlearning(data, options)
    if method == "elearn-oracle":
        return fit_elearning(data, replace(options, variance="oracle"), nuisance)
    if method not in FITTERS:
        raise InvalidArgumentError(f"unknown method {method!r}")
    return FITTERS[method](data, options, nuisance)
