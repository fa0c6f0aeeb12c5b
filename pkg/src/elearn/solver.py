"""Accelerated proximal gradient for row-wise group-LASSO penalized quadratics.

Every penalized problem in the package is a quadratic in a coefficient
matrix ``M`` (vectorized column-major)::

    F(M) = 1/2 vec(M)^T H vec(M) - q^T vec(M) + c  +  lam * sum_j ||M[j, :]||_2

where the sum runs over penalized rows.  The E-Learning objective
``1/2 ||E_n phi(B)||^2`` has ``H = J^T J``; weighted least-squares losses have
``H`` equal to a weighted Gram matrix.  Column vectors give the plain lasso.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DivergenceError, InvalidArgumentError, SingularSystemError
from .evaluation import ipwe_arrays


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 5000
    tol: float = 1e-7
    restart: bool = True
    backtrack: float = 0.5
    step0: float = 1.0
    penalize_intercept: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidArgumentError("tol must be positive")
        if not 0.0 < self.backtrack < 1.0:
            raise InvalidArgumentError("backtracking factor must lie in (0, 1)")
        if self.max_iter < 1 or self.step0 <= 0:
            raise InvalidArgumentError("max_iter and step0 must be positive")

    def penalized_rows(self, nrows: int) -> np.ndarray:
        mask = np.ones(nrows, dtype=bool)
        if not self.penalize_intercept:
            mask[0] = False
        return mask


@dataclass
class Quadratic:
    """``1/2 v^T H v - q^T v + const`` with ``v = vec(M)``, ``M`` of ``shape``."""

    H: np.ndarray
    q: np.ndarray
    const: float
    shape: tuple
    # optional factored form 1/2 ||J v - r||^2, evaluated without cancellation
    J: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None

    @classmethod
    def from_residual(cls, J, r, shape) -> "Quadratic":
        J = np.asarray(J, dtype=float)
        r = np.asarray(r, dtype=float)
        return cls(H=J.T @ J, q=J.T @ r, const=0.5 * float(r @ r), shape=tuple(shape),
                   J=J, r=r)

    def vec(self, M) -> np.ndarray:
        return np.asarray(M, dtype=float).reshape(-1, order="F")

    def mat(self, v) -> np.ndarray:
        return np.asarray(v).reshape(self.shape, order="F")

    def value_grad(self, M):
        v = self.vec(M)
        if self.J is not None:
            res = self.J @ v - self.r
            return 0.5 * float(res @ res), self.mat(self.J.T @ res)
        Hv = self.H @ v
        f = 0.5 * (v @ Hv) - self.q @ v + self.const
        return float(f), self.mat(Hv - self.q)

    def value(self, M) -> float:
        return self.value_grad(M)[0]

    def gradient(self, M) -> np.ndarray:
        return self.value_grad(M)[1]

    def minimize_direct(self) -> np.ndarray:
        """Unpenalized minimizer via a direct linear solve."""
        if np.linalg.cond(self.H) > 1e13:
            raise SingularSystemError(
                "normal matrix is singular; add regularization or more data"
            )
        return self.mat(np.linalg.solve(self.H, self.q))


class LeastSquaresProblem:
    """Weighted least squares ``1/2 mean_i w_i ||T_i - pred_i(M)||^2``.

    With a 1-d response ``T`` the prediction is ``Z_i . vec(M)`` and ``M`` has
    any ``shape`` with ``prod(shape) == Z.shape[1]``.  With an (n, m) response
    the prediction is ``M^T Z_i`` and ``M`` is ``(Z.shape[1], m)``.
    """

    def __init__(self, Z, T, w=None, shape=None, penalized=None):
        self.Z = np.asarray(Z, dtype=float)
        self.T = np.asarray(T, dtype=float)
        n, D = self.Z.shape
        self.w = np.ones(n) if w is None else np.asarray(w, dtype=float)
        if self.T.shape[0] != n or self.w.shape != (n,):
            raise InvalidArgumentError("design, response and weights disagree in length")
        self.multi = self.T.ndim == 2
        if self.multi:
            self.shape = (D, self.T.shape[1])
        else:
            self.shape = (D, 1) if shape is None else tuple(shape)
            if int(np.prod(self.shape)) != D:
                raise InvalidArgumentError(f"shape {self.shape} does not match {D} columns")
        self.penalized = (np.ones(self.shape[0], dtype=bool) if penalized is None
                          else np.asarray(penalized, dtype=bool))

    def _rows(self, idx):
        if idx is None:
            return self.Z, self.T, self.w
        return self.Z[idx], self.T[idx], self.w[idx]

    def quadratic(self, idx=None) -> Quadratic:
        Z, T, w = self._rows(idx)
        n = Z.shape[0]
        Zw = Z * w[:, None]
        G = Zw.T @ Z / n
        if self.multi:
            m = T.shape[1]
            H = np.kron(np.eye(m), G)
            q = (Zw.T @ T / n).reshape(-1, order="F")
            const = 0.5 * float(np.sum(w[:, None] * T * T)) / n
        else:
            H, q = G, Zw.T @ T / n
            const = 0.5 * float(np.sum(w * T * T)) / n
        return Quadratic(H=0.5 * (H + H.T), q=q, const=const, shape=self.shape)

    def predict(self, M, idx=None) -> np.ndarray:
        Z = self.Z if idx is None else self.Z[idx]
        M = np.asarray(M, dtype=float)
        if self.multi:
            return Z @ M
        return Z @ M.reshape(-1, order="F")

    def loss(self, M, idx=None) -> float:
        """Weighted mean squared error (without the 1/2)."""
        _, T, w = self._rows(idx)
        res = T - self.predict(M, idx)
        if self.multi:
            return float(np.mean(w * np.sum(res * res, axis=1)))
        return float(np.mean(w * res * res))

    def solve_direct(self) -> np.ndarray:
        """Unpenalized minimizer by least squares on the root-weighted design."""
        sw = np.sqrt(self.w)
        sol = np.linalg.lstsq(self.Z * sw[:, None], self.T * (sw[:, None] if self.multi else sw),
                              rcond=None)[0]
        if self.multi:
            return sol
        return sol.reshape(self.shape, order="F")


# ---------------------------------------------------------------------------
# Penalty
# ---------------------------------------------------------------------------


def _default_mask(nrows: int, penalized) -> np.ndarray:
    if penalized is None:
        mask = np.ones(nrows, dtype=bool)
        mask[0] = False
        return mask
    return np.asarray(penalized, dtype=bool)


def group_penalty(M, penalized=None) -> float:
    """``sum_j ||M[j, :]||_2`` over penalized rows (all but row 0 by default)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    mask = _default_mask(M.shape[0], penalized)
    return float(np.linalg.norm(M[mask], axis=1).sum())


def prox_group_rows(M, threshold: float, penalized=None) -> np.ndarray:
    """Row-wise block soft-thresholding.

    Each penalized row ``b`` becomes ``max(0, 1 - threshold/||b||) * b``; other
    rows are returned unchanged.  With one column this is the lasso prox.
    """
    if threshold < 0:
        raise InvalidArgumentError("threshold must be non-negative")
    M = np.array(M, dtype=float, copy=True)
    if threshold == 0:
        return M
    mask = _default_mask(M.shape[0], penalized)
    norms = np.linalg.norm(M, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        shrink = np.where(norms > threshold, 1.0 - threshold / norms, 0.0)
    M[mask] *= shrink[mask, None]
    return M


# ---------------------------------------------------------------------------
# APG
# ---------------------------------------------------------------------------


@dataclass
class ApgResult:
    x: np.ndarray
    objective: float
    n_iter: int
    converged: bool
    step: float
    history: list = field(default_factory=list, repr=False)


def apg_minimize(smooth: Callable, prox: Callable, penalty: Callable, x0,
                 config: SolverConfig = SolverConfig(), step: Optional[float] = None,
                 keep_history: bool = False) -> ApgResult:
    """FISTA with backtracking and function-value restart.

    ``smooth(x) -> (f, grad)``, ``prox(x, t)`` is the prox of ``t * penalty``.
    A step that raises the objective resets the momentum and is retried from
    the last accepted iterate, so accepted objectives never increase.
    """
    x = np.array(x0, dtype=float, copy=True)
    step = config.step0 if step is None else float(step)
    fx, gx = smooth(x)
    Fx = fx + penalty(x)
    if not math.isfinite(Fx):
        raise DivergenceError("objective is not finite at the initial point")
    history = [Fx] if keep_history else []
    y, fy, gy = x, fx, gx
    t = 1.0
    converged = False
    it = 0
    restarted = False
    while it < config.max_iter:
        it += 1
        while True:
            z = prox(y - step * gy, step)
            fz, gz = smooth(z)
            d = z - y
            bound = fy + float(np.sum(gy * d)) + float(np.sum(d * d)) / (2.0 * step)
            if fz <= bound + 1e-12 * abs(fy):
                break
            step *= config.backtrack
            if step < 1e-300:
                raise DivergenceError("step size underflow in line search")
        Fz = fz + penalty(z)
        if not math.isfinite(Fz):
            raise DivergenceError("objective became non-finite")
        if config.restart and Fz > Fx:
            if restarted:
                # a plain proximal step from x cannot decrease further
                converged = True
                break
            t = 1.0
            y, fy, gy = x, fx, gx
            restarted = True
            continue
        restarted = False
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_new
        change = abs(Fx - Fz)
        scale = max(abs(Fx), 1e-300)
        moved = float(np.linalg.norm(z - x))
        size = max(1.0, float(np.linalg.norm(z)))
        x_prev = x
        x, fx, gx, Fx, t = z, fz, gz, Fz, t_new
        if keep_history:
            history.append(Fx)
        # both the objective and the iterate must have settled
        if change <= config.tol * scale and moved <= config.tol * size:
            converged = True
            break
        if beta == 0.0:
            y, fy, gy = x, fx, gx
        else:
            y = x + beta * (x - x_prev)
            fy, gy = smooth(y)
    return ApgResult(x=x, objective=Fx, n_iter=it, converged=converged, step=step,
                     history=history)


def lipschitz_step(quad: Quadratic) -> float:
    """``1 / lambda_max(H)``, the exact inverse Lipschitz constant of the gradient."""
    top = float(np.linalg.eigvalsh(0.5 * (quad.H + quad.H.T))[-1])
    return 1.0 / top if top > 0 else 1.0


def solve_penalized(quad: Quadratic, lam: float, penalized, config: SolverConfig = SolverConfig(),
                    init=None, step: Optional[float] = None,
                    keep_history: bool = False) -> ApgResult:
    """Minimize ``quad + lam * group_penalty`` by APG.

    Without an explicit ``step`` the search starts at ``1 / lambda_max(H)``.
    The compiled loop is used unless the objective history is requested.
    """
    penalized = np.asarray(penalized, dtype=bool)
    x0 = np.zeros(quad.shape) if init is None else np.asarray(init, dtype=float)
    if step is None:
        step = lipschitz_step(quad)
    if keep_history:
        return apg_minimize(
            quad.value_grad,
            lambda M, t: prox_group_rows(M, t * lam, penalized),
            lambda M: lam * group_penalty(M, penalized),
            x0, config, step=step, keep_history=True,
        )
    from . import _apg_kernel as kernel

    factored = quad.J is not None
    D = quad.H.shape[0]
    J = quad.J if factored else np.zeros((1, D))
    r = quad.r if factored else np.zeros(1)
    x, F, it, conv, step, status = kernel.apg_quadratic(
        np.ascontiguousarray(quad.H), np.ascontiguousarray(quad.q), float(quad.const),
        np.ascontiguousarray(J), np.ascontiguousarray(r), factored,
        quad.shape[0], quad.shape[1], penalized, float(lam), quad.vec(x0).copy(),
        float(step), int(config.max_iter), float(config.tol), float(config.backtrack),
        bool(config.restart),
    )
    if status == kernel.STATUS_NONFINITE:
        raise DivergenceError("objective became non-finite")
    if status == kernel.STATUS_UNDERFLOW:
        raise DivergenceError("step size underflow in line search")
    return ApgResult(x=quad.mat(x).copy(), objective=float(F), n_iter=int(it),
                     converged=bool(conv), step=float(step))


# ---------------------------------------------------------------------------
# Lambda path
# ---------------------------------------------------------------------------


@dataclass
class LambdaPath:
    lambdas: np.ndarray
    solutions: list
    objectives: np.ndarray
    n_iter: np.ndarray
    criterion: Optional[np.ndarray] = None


def null_model(quad: Quadratic, penalized) -> np.ndarray:
    """Minimizer with every penalized row fixed at zero."""
    penalized = np.asarray(penalized, dtype=bool)
    M = np.zeros(quad.shape)
    free = np.zeros(quad.shape, dtype=bool)
    free[~penalized, :] = True
    idx = np.flatnonzero(quad.vec(free))
    if idx.size:
        sol = np.linalg.lstsq(quad.H[np.ix_(idx, idx)], quad.q[idx], rcond=None)[0]
        v = np.zeros(quad.H.shape[0])
        v[idx] = sol
        M = quad.mat(v)
    return M


def lambda_max(quad: Quadratic, penalized) -> float:
    """Smallest ``lam`` for which the null model satisfies the KKT conditions."""
    penalized = np.asarray(penalized, dtype=bool)
    if not penalized.any():
        return 0.0
    g = quad.gradient(null_model(quad, penalized))
    return float(np.linalg.norm(g[penalized], axis=1).max())


def lambda_grid(lam_max: float, grid_size: int = 50, ratio: float = 1e-3) -> np.ndarray:
    if grid_size < 1:
        raise InvalidArgumentError("grid_size must be >= 1")
    if not lam_max > 0:
        lam_max = 1.0
    if grid_size == 1:
        return np.array([lam_max])
    return lam_max * np.geomspace(1.0, ratio, grid_size)


def lambda_path(quad: Quadratic, penalized, grid_size: int = 50,
                config: SolverConfig = SolverConfig(),
                lambdas: Optional[np.ndarray] = None) -> LambdaPath:
    """Warm-started solutions along a descending geometric grid."""
    penalized = np.asarray(penalized, dtype=bool)
    if lambdas is None:
        lambdas = lambda_grid(lambda_max(quad, penalized), grid_size)
    lambdas = np.asarray(lambdas, dtype=float)
    M = null_model(quad, penalized)
    step = None
    sols, objs, iters = [], [], []
    for lam in lambdas:
        res = solve_penalized(quad, lam, penalized, config, init=M, step=step)
        M, step = res.x, res.step
        sols.append(M)
        objs.append(res.objective)
        iters.append(res.n_iter)
    return LambdaPath(lambdas=lambdas, solutions=sols, objectives=np.array(objs),
                      n_iter=np.array(iters))


def kkt_check(M, quad: Quadratic, lam: float, penalized) -> float:
    """Largest violation of the group-LASSO optimality conditions."""
    penalized = np.asarray(penalized, dtype=bool)
    M = np.asarray(M, dtype=float)
    g = quad.gradient(M)
    gn = np.linalg.norm(g, axis=1)
    norms = np.linalg.norm(M, axis=1)
    viol = gn.copy()
    zero = penalized & (norms == 0)
    nz = penalized & (norms > 0)
    viol[zero] = np.maximum(0.0, gn[zero] - lam)
    if nz.any():
        viol[nz] = np.linalg.norm(g[nz] + lam * M[nz] / norms[nz, None], axis=1)
    return float(viol.max())


# ---------------------------------------------------------------------------
# IPWE tuning
# ---------------------------------------------------------------------------


@dataclass
class TuneResult:
    lam: float
    solution: np.ndarray
    path: LambdaPath
    criteria: np.ndarray
    index: int


def cross_validate_path(problem, folds, score: Callable, grid_size: int = 50,
                        config: SolverConfig = SolverConfig(),
                        lambdas: Optional[np.ndarray] = None) -> TuneResult:
    """Pick ``lam`` maximizing the fold-averaged ``score(M, valid_rows)``.

    ``problem`` provides ``quadratic(idx)`` (``idx=None`` for all rows) and the
    row mask ``penalized``.  The grid comes from the full-data problem and is
    shared by every fold; ties go to the larger ``lam``.
    """
    folds = np.asarray(folds)
    penalized = problem.penalized
    full = problem.quadratic(None)
    if lambdas is None:
        lambdas = lambda_grid(lambda_max(full, penalized), grid_size)
    lambdas = np.asarray(lambdas, dtype=float)
    full_path = lambda_path(full, penalized, config=config, lambdas=lambdas)
    fold_ids = np.unique(folds)
    if fold_ids.size < 2:
        raise InvalidArgumentError("cross-validation needs at least two folds")
    scores = np.zeros((fold_ids.size, lambdas.size))
    for f_i, f in enumerate(fold_ids):
        valid = np.flatnonzero(folds == f)
        train = np.flatnonzero(folds != f)
        path = lambda_path(problem.quadratic(train), penalized, config=config,
                           lambdas=lambdas)
        for j, M in enumerate(path.solutions):
            scores[f_i, j] = score(M, valid)
    crit = scores.mean(axis=0)
    best = int(np.argmax(crit))
    full_path.criterion = crit
    return TuneResult(lam=float(lambdas[best]), solution=full_path.solutions[best],
                      path=full_path, criteria=crit, index=best)


def tune_by_ipwe(problem, folds, grid_size: int = 50,
                 config: SolverConfig = SolverConfig(),
                 lambdas: Optional[np.ndarray] = None) -> TuneResult:
    """Choose ``lam`` maximizing the fold-averaged IPWE of the induced rule.

    Besides ``quadratic`` and ``penalized``, ``problem`` provides
    ``rule(M, idx)`` and the arrays ``A``, ``Y`` and ``prop`` (n x K).
    """
    def score(M, valid):
        return ipwe_arrays(problem.A[valid], problem.Y[valid], problem.rule(M, valid),
                           problem.prop[valid])

    return cross_validate_path(problem, folds, score, grid_size, config, lambdas)
