"""Cross-fitted nuisance estimation: propensity, treatment-free effect, variance."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp, softmax

from .coding import CodingMatrix
from .dataio import Dataset, Standardizer, add_intercept, derive_seed
from .errors import DataError, InvalidArgumentError
from .forest import ForestParams, fit_forest
from .solver import (
    LeastSquaresProblem,
    SolverConfig,
    apg_minimize,
    cross_validate_path,
    group_penalty,
    lambda_grid,
    null_model,
    prox_group_rows,
    solve_penalized,
)

P_FLOOR = 0.01
SIGMA2_FLOOR = 1e-4
SIGMA2_CAP = 1e6
_FOLD_STREAM = 11


@dataclass
class NuisanceFit:
    """Per-observation nuisance predictions used by the learners."""

    mu0: np.ndarray
    prop: np.ndarray
    sigma2: np.ndarray
    folds: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float)
        self.prop = np.asarray(self.prop, dtype=float)
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        n = self.mu0.shape[0]
        if self.prop.shape[0] != n or self.sigma2.shape != self.prop.shape:
            raise InvalidArgumentError("nuisance arrays disagree in shape")
        if not (np.all(np.isfinite(self.mu0)) and np.all(np.isfinite(self.prop))
                and np.all(np.isfinite(self.sigma2))):
            raise InvalidArgumentError("nuisance predictions must be finite")

    def with_sigma2(self, sigma2) -> "NuisanceFit":
        return replace(self, sigma2=np.asarray(sigma2, dtype=float))


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def floor_simplex(P, floor: float = P_FLOOR) -> np.ndarray:
    """Project rows onto ``{p : sum p = 1, p >= floor}`` by raising small
    entries to ``floor`` and rescaling the rest."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    K = P.shape[1]
    if floor * K > 1:
        raise InvalidArgumentError(f"floor {floor} infeasible for {K} arms")
    P = np.clip(P, 0.0, None)
    s = P.sum(axis=1, keepdims=True)
    P = np.where(s > 0, P / np.where(s > 0, s, 1.0), 1.0 / K)
    out = P.copy()
    fixed = np.zeros(P.shape, dtype=bool)
    for _ in range(K):
        low = (out < floor) & ~fixed
        if not low.any():
            break
        fixed |= low
        free_mass = np.where(fixed, 0.0, P).sum(axis=1, keepdims=True)
        budget = 1.0 - floor * fixed.sum(axis=1, keepdims=True)
        ratio = np.where(free_mass > 0, budget / np.where(free_mass > 0, free_mass, 1.0), 0.0)
        out = np.where(fixed, floor, P * ratio)
    return out / out.sum(axis=1, keepdims=True)


def make_folds(n: int, k: int, seed: int = 0) -> np.ndarray:
    """Balanced random fold labels ``0..k-1``, deterministic in ``(n, k, seed)``."""
    if k < 2 or n < k:
        raise InvalidArgumentError(f"need 2 <= folds <= n, got folds={k}, n={n}")
    rng = np.random.default_rng(derive_seed(seed, _FOLD_STREAM))
    folds = np.empty(n, dtype=int)
    folds[rng.permutation(n)] = np.arange(n) % k
    return folds


def cross_fit(data: Dataset, fitter: Callable, folds=10, seed: int = 0) -> np.ndarray:
    """Out-of-fold predictions.

    ``fitter(train)`` returns a callable mapping a covariate matrix to
    predictions; ``folds`` is a fold count or an explicit label array.
    """
    if np.ndim(folds) == 0:
        if data.n < int(folds):
            raise InvalidArgumentError(f"n={data.n} is smaller than folds={folds}")
        folds = make_folds(data.n, int(folds), seed)
    folds = np.asarray(folds)
    out = None
    for f in np.unique(folds):
        hold = folds == f
        predict = fitter(data.subset(~hold))
        pred = np.asarray(predict(data.X[hold]), dtype=float)
        if out is None:
            out = np.empty((data.n,) + pred.shape[1:])
        out[hold] = pred
    return out


def _check_arm_counts(data: Dataset, minimum: int = 2) -> None:
    counts = np.bincount(data.A, minlength=data.K + 1)[1:]
    for k, c in enumerate(counts, start=1):
        if c < minimum:
            raise DataError(f"arm {k} has {c} observation(s); at least {minimum} required")


# ---------------------------------------------------------------------------
# Propensity: group-lasso multinomial logistic regression
# ---------------------------------------------------------------------------


@dataclass
class PropensityModel:
    tau: np.ndarray  # (p+1) x K, rows centered across arms
    lam: float
    standardizer: Standardizer
    cv_loglik: Optional[np.ndarray] = None
    lambdas: Optional[np.ndarray] = None

    def predict(self, X, floor: Optional[float] = P_FLOOR) -> np.ndarray:
        Xt = add_intercept(self.standardizer.transform(np.atleast_2d(X)))
        P = softmax(Xt @ self.tau, axis=1)
        return P if floor is None else floor_simplex(P, floor)


def _multinomial_parts(Xt, A, K):
    n = Xt.shape[0]
    Yoh = np.zeros((n, K))
    Yoh[np.arange(n), A - 1] = 1.0

    rows = np.arange(n)

    def smooth(tau):
        eta = Xt @ tau
        top = eta.max(axis=1)
        E = np.exp(eta - top[:, None])
        s = E.sum(axis=1)
        f = float(np.mean(top + np.log(s) - eta[rows, A - 1]))
        return f, Xt.T @ (E / s[:, None] - Yoh) / n

    return smooth, Yoh


def _null_tau(A, K, d):
    freq = np.bincount(A, minlength=K + 1)[1:] / A.size
    tau = np.zeros((d, K))
    tau[0] = np.log(np.maximum(freq, 1e-300))
    tau[0] -= tau[0].mean()
    return tau


def _logistic_path(Xt, A, K, lambdas, config, init=None):
    smooth, _ = _multinomial_parts(Xt, A, K)
    d = Xt.shape[1]
    mask = np.ones(d, dtype=bool)
    mask[0] = False
    tau = _null_tau(A, K, d) if init is None else init
    step = None
    sols = []
    for lam in lambdas:
        res = apg_minimize(
            smooth,
            lambda M, t, lam=lam: prox_group_rows(M, t * lam, mask),
            lambda M, lam=lam: lam * group_penalty(M, mask),
            tau, config, step=step,
        )
        tau, step = res.x, res.step
        sols.append(tau)
    return sols


def _logistic_lambda_max(Xt, A, K) -> float:
    smooth, _ = _multinomial_parts(Xt, A, K)
    g = smooth(_null_tau(A, K, Xt.shape[1]))[1]
    return float(np.linalg.norm(g[1:], axis=1).max()) if g.shape[0] > 1 else 0.0


def fit_propensity_logistic(data: Dataset, lambdas=None, folds=10, seed: int = 0,
                            lam: Optional[float] = None, grid_size: int = 50,
                            config: SolverConfig = SolverConfig(tol=1e-6)) -> PropensityModel:
    """Group-lasso multinomial logistic regression with intercepts unpenalized.

    ``lam`` fixes the penalty; otherwise it is chosen by cross-validated
    held-out log-likelihood over ``lambdas`` (default: 50-point geometric
    grid from the null-model threshold down to ``1e-3`` of it).
    """
    _check_arm_counts(data)
    std = Standardizer.fit(data.X)
    Xt = add_intercept(std.transform(data.X))
    K = data.K
    if lam is not None:
        tau = _logistic_path(Xt, data.A, K, [float(lam)], config)[-1]
        return PropensityModel(tau=tau, lam=float(lam), standardizer=std)
    if lambdas is None:
        lambdas = lambda_grid(_logistic_lambda_max(Xt, data.A, K), grid_size)
    lambdas = np.asarray(lambdas, dtype=float)
    fold_ids = make_folds(data.n, folds, seed) if np.ndim(folds) == 0 else np.asarray(folds)
    scores = np.zeros(lambdas.size)
    for f in np.unique(fold_ids):
        hold = fold_ids == f
        train_arms = np.bincount(data.A[~hold], minlength=K + 1)[1:]
        if np.any(train_arms == 0):
            raise DataError("a cross-validation fold leaves an arm unobserved")
        sols = _logistic_path(Xt[~hold], data.A[~hold], K, lambdas, config)
        rows = np.arange(hold.sum())
        for j, tau in enumerate(sols):
            eta = Xt[hold] @ tau
            ll = eta[rows, data.A[hold] - 1] - logsumexp(eta, axis=1)
            scores[j] += ll.sum()
    scores /= data.n
    best = int(np.argmax(scores))
    tau = _logistic_path(Xt, data.A, K, lambdas[: best + 1], config)[-1]
    return PropensityModel(tau=tau, lam=float(lambdas[best]), standardizer=std,
                           cv_loglik=scores, lambdas=lambdas)


def fit_propensity_forest(data: Dataset, params: ForestParams = ForestParams(),
                          folds=10, seed: int = 0, floor: float = P_FLOOR) -> np.ndarray:
    """Cross-fitted per-arm forest probabilities, normalized and floored."""

    def fitter(train: Dataset):
        forests = [
            fit_forest(train.X, (train.A == k).astype(float),
                       replace(params, seed=derive_seed(params.seed, k)))
            for k in range(1, data.K + 1)
        ]
        return lambda X: np.column_stack([f.predict_many(X) for f in forests])

    raw = cross_fit(data, fitter, folds, seed)
    return floor_simplex(raw, floor)


def cross_fit_propensity(data: Dataset, lam: float, folds, seed: int = 0,
                         config: SolverConfig = SolverConfig(tol=1e-6)) -> np.ndarray:
    """Out-of-fold logistic propensities at a fixed penalty."""
    return cross_fit(
        data,
        lambda train: fit_propensity_logistic(train, lam=lam, config=config).predict,
        folds, seed,
    )


# ---------------------------------------------------------------------------
# Treatment-free effect
# ---------------------------------------------------------------------------


@dataclass
class TreatmentFreeModel:
    eta: np.ndarray  # (p+1,), intercept first
    B: np.ndarray  # (p+1) x (K-1), joint nuisance fit
    lam: float
    cv_loss: Optional[np.ndarray] = None
    lambdas: Optional[np.ndarray] = None

    def predict(self, X) -> np.ndarray:
        return add_intercept(np.atleast_2d(X)) @ self.eta


def _joint_problem(X, A, Y, prop, coding: CodingMatrix) -> LeastSquaresProblem:
    Xt = add_intercept(X)
    n, d = Xt.shape
    wa = coding.W[np.asarray(A) - 1]
    inter = coding.scale * (wa[:, :, None] * Xt[:, None, :]).reshape(n, -1)
    Z = np.hstack([Xt, inter])
    w = 1.0 / prop[np.arange(n), np.asarray(A) - 1]
    penalized = np.ones(Z.shape[1], dtype=bool)
    penalized[0::d] = False  # intercepts of eta and of every column of B
    return LeastSquaresProblem(Z, Y, w, penalized=penalized)


def _split_joint(theta, d, K):
    theta = np.asarray(theta).ravel()
    return theta[:d].copy(), theta[d:].reshape((d, K - 1), order="F").copy()


def fit_treatment_free(data: Dataset, propensity, coding: CodingMatrix, lambdas=None,
                       folds=10, seed: int = 0, lam: Optional[float] = None,
                       grid_size: int = 50,
                       config: SolverConfig = SolverConfig()) -> TreatmentFreeModel:
    """Joint inverse-propensity weighted lasso of ``Y`` on ``(1, X)`` and the
    angle-coded interactions; returns the treatment-free part.

    ``lam`` fixes the penalty (``0`` gives the weighted least-squares
    solution); otherwise it is chosen by cross-validated weighted squared
    error.
    """
    prop = np.asarray(propensity, dtype=float)
    if prop.shape != (data.n, data.K):
        raise InvalidArgumentError(f"propensity must be {data.n} x {data.K}, got {prop.shape}")
    if np.any(prop <= 0):
        raise InvalidArgumentError("propensities must be positive")
    prob = _joint_problem(data.X, data.A, data.Y, prop, coding)
    d = data.p + 1
    if lam is not None and lam == 0:
        eta, B = _split_joint(prob.solve_direct(), d, data.K)
        return TreatmentFreeModel(eta=eta, B=B, lam=0.0)
    if lam is not None:
        quad = prob.quadratic()
        res = solve_penalized(quad, float(lam), prob.penalized, config,
                              init=null_model(quad, prob.penalized))
        eta, B = _split_joint(res.x, d, data.K)
        return TreatmentFreeModel(eta=eta, B=B, lam=float(lam))
    fold_ids = make_folds(data.n, folds, seed) if np.ndim(folds) == 0 else np.asarray(folds)
    tuned = cross_validate_path(prob, fold_ids, lambda M, idx: -prob.loss(M, idx),
                                grid_size, config, lambdas)
    eta, B = _split_joint(tuned.solution, d, data.K)
    return TreatmentFreeModel(eta=eta, B=B, lam=tuned.lam, cv_loss=-tuned.criteria,
                              lambdas=tuned.path.lambdas)


def cross_fit_treatment_free(data: Dataset, propensity, coding: CodingMatrix, lam: float,
                             folds, seed: int = 0,
                             config: SolverConfig = SolverConfig()) -> np.ndarray:
    """Out-of-fold linear treatment-free predictions at a fixed penalty."""
    prop = np.asarray(propensity, dtype=float)
    if np.ndim(folds) == 0:
        folds = make_folds(data.n, int(folds), seed)
    folds = np.asarray(folds)
    out = np.empty(data.n)
    for f in np.unique(folds):
        hold = folds == f
        model = fit_treatment_free(data.subset(~hold), prop[~hold], coding, lam=lam,
                                   config=config)
        out[hold] = model.predict(data.X[hold])
    return out


def fit_treatment_free_forest(data: Dataset, params: ForestParams = ForestParams(),
                              folds=10, seed: int = 0) -> np.ndarray:
    """Cross-fitted average over arms of per-arm outcome forests."""

    def fitter(train: Dataset):
        forests = []
        for k in range(1, data.K + 1):
            rows = train.A == k
            forests.append(fit_forest(train.X[rows], train.Y[rows],
                                      replace(params, seed=derive_seed(params.seed, k))))
        return lambda X: np.mean([f.predict_many(X) for f in forests], axis=0)

    return cross_fit(data, fitter, folds, seed)


# ---------------------------------------------------------------------------
# Working variance
# ---------------------------------------------------------------------------


def _variance_features(X, arms, K) -> np.ndarray:
    onehot = np.zeros((X.shape[0], K - 1))
    a = np.asarray(arms, dtype=int)
    rows = np.flatnonzero(a > 1)
    onehot[rows, a[rows] - 2] = 1.0
    return np.hstack([X, onehot])


def clamp_variance(S) -> np.ndarray:
    return np.clip(np.asarray(S, dtype=float), SIGMA2_FLOOR, SIGMA2_CAP)


def fit_variance(data: Dataset, mu0, pilot, coding: CodingMatrix,
                 params: ForestParams = ForestParams()) -> np.ndarray:
    """Forest regression of squared pilot residuals on ``(X, arm indicators)``.

    ``pilot`` is a fitted decision model (anything with ``effects(X)``) or an
    (n, K) matrix of fitted interaction effects.  Returns the clamped n x K
    matrix of predicted variances for every arm.
    """
    if hasattr(pilot, "effects"):
        gamma = pilot.effects(data.X)
    else:
        gamma = np.asarray(pilot, dtype=float)
    if gamma.shape != (data.n, coding.K):
        raise InvalidArgumentError(f"pilot effects must be {data.n} x {coding.K}")
    idx = np.arange(data.n)
    resid = data.Y - np.asarray(mu0, dtype=float) - gamma[idx, data.A - 1]
    forest = fit_forest(_variance_features(data.X, data.A, coding.K), resid**2, params)
    S = np.column_stack([
        forest.predict_many(_variance_features(data.X, np.full(data.n, k), coding.K))
        for k in range(1, coding.K + 1)
    ])
    return clamp_variance(S)


def oracle_variance(scenario, X, mu0_hat) -> np.ndarray:
    """``(mu0_hat - mu0)^2 + sigma^2(x, k)`` from the scenario truths."""
    X = np.asarray(X, dtype=float)
    bias2 = (np.asarray(mu0_hat, dtype=float) - scenario.mu0(X)) ** 2
    return clamp_variance(bias2[:, None] + scenario.sigma2(X))


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def estimate_nuisances(data: Dataset, coding: CodingMatrix, propensity: str = "logistic",
                       tf: str = "linear", folds: int = 10, seed: int = 0,
                       forest: ForestParams = ForestParams(), scenario=None,
                       propensity_matrix=None,
                       config: SolverConfig = SolverConfig()) -> NuisanceFit:
    """Cross-fitted propensity and treatment-free predictions.

    Penalties for the linear working models are tuned once on the full data;
    the cross-fitting folds reuse them.  ``sigma2`` is initialized to ones.
    """
    fold_ids = make_folds(data.n, folds, seed)
    info: dict = {"propensity": propensity, "tf": tf}
    if propensity == "logistic":
        model = fit_propensity_logistic(data, folds=fold_ids)
        prop = floor_simplex(cross_fit_propensity(data, model.lam, fold_ids))
        info["propensity_lambda"] = model.lam
    elif propensity == "forest":
        prop = fit_propensity_forest(data, replace(forest, seed=derive_seed(seed, 1)), fold_ids)
    elif propensity == "known":
        if scenario is None:
            raise InvalidArgumentError("known propensity requires a scenario")
        prop = floor_simplex(scenario.propensity(data.X))
    elif propensity == "file":
        if propensity_matrix is None:
            raise InvalidArgumentError("propensity='file' requires a propensity matrix")
        prop = np.asarray(propensity_matrix, dtype=float)
        if prop.shape != (data.n, data.K):
            raise DataError(f"propensity file must be {data.n} x {data.K}, got {prop.shape}")
        prop = floor_simplex(prop)
    else:
        raise InvalidArgumentError(f"unknown propensity model {propensity!r}")

    if tf == "linear":
        model = fit_treatment_free(data, prop, coding, folds=fold_ids, config=config)
        mu0 = cross_fit_treatment_free(data, prop, coding, model.lam, fold_ids, config=config)
        info["tf_lambda"] = model.lam
    elif tf == "forest":
        mu0 = fit_treatment_free_forest(data, replace(forest, seed=derive_seed(seed, 2)),
                                        fold_ids)
    elif tf == "zero":
        mu0 = np.zeros(data.n)
    else:
        raise InvalidArgumentError(f"unknown treatment-free model {tf!r}")
    return NuisanceFit(mu0=mu0, prop=prop, sigma2=np.ones((data.n, data.K)),
                       folds=fold_ids, info=info)
