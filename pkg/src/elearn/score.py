"""Efficient estimating equation for the linear angle-based decision function.

For a row ``(x, a, y)`` with design vector ``xt = (1, x)`` the efficient
estimating function is::

    phi = r * (Gram V^+ w_a / p_a) kron xt,   r = y - mu0 - (1-1/K) <w_a, B^T xt>

with ``V = sum_k sigma2_k w_k w_k^T / p_k``.  It is linear in ``vec(B)``
(column-major), so the empirical mean is ``rhs - J vec(B)`` for a fixed
Jacobian ``J``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coding import CodingMatrix, build_coding, decide, interaction_effects
from .dataio import Standardizer, add_intercept, poly_expand
from .errors import InvalidArgumentError, SingularSystemError
from .solver import Quadratic

EIG_REL_TOL = 1e-10
COND_LIMIT = 1e12


# ---------------------------------------------------------------------------
# Decision model
# ---------------------------------------------------------------------------


@dataclass
class DecisionModel:
    """``f(x) = B^T xt`` where ``xt`` is the intercept-augmented feature row.

    ``standardizer`` and ``degree`` map raw covariates to features; with
    ``standardizer=None`` the covariates are used as they are.
    """

    B: np.ndarray
    coding: CodingMatrix
    standardizer: Optional[Standardizer] = None
    degree: int = 1

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float)
        if self.B.ndim != 2 or self.B.shape[1] != self.coding.K - 1:
            raise InvalidArgumentError(
                f"B must have K-1={self.coding.K - 1} columns, got shape {self.B.shape}"
            )
        if not np.all(np.isfinite(self.B)):
            raise InvalidArgumentError("B has non-finite entries")

    @property
    def n_features(self) -> int:
        return self.B.shape[0] - 1

    def design(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        Z = poly_expand(X, self.degree) if self.degree != 1 else X
        if self.standardizer is not None:
            Z = self.standardizer.transform(Z)
        if Z.shape[1] != self.n_features:
            raise InvalidArgumentError(
                f"model expects {self.n_features} features after expansion, "
                f"got {Z.shape[1]} from input of shape {X.shape}"
            )
        return add_intercept(Z)

    def decision(self, X) -> np.ndarray:
        return self.design(X) @ self.B

    def effects(self, X) -> np.ndarray:
        """Fitted interaction effects, shape (n, K)."""
        return interaction_effects(self.decision(X), self.coding)

    def decide(self, X) -> np.ndarray:
        return np.atleast_1d(decide(self.decision(X), self.coding))

    def to_dict(self) -> dict:
        return {
            "K": self.coding.K,
            "degree": self.degree,
            "B": self.B.tolist(),
            "standardizer": None if self.standardizer is None else self.standardizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionModel":
        std = d.get("standardizer")
        return cls(
            B=np.asarray(d["B"], dtype=float),
            coding=build_coding(int(d["K"])),
            standardizer=None if std is None else Standardizer.from_dict(std),
            degree=int(d.get("degree", 1)),
        )


# ---------------------------------------------------------------------------
# V_eps algebra
# ---------------------------------------------------------------------------


@dataclass
class VEpsMatrix:
    matrix: np.ndarray
    pinv: np.ndarray


def _pinv_sym(V: np.ndarray):
    """Batched symmetric pseudo-inverse; returns (pinv, eigvecs, inverted eigvals)."""
    w, Q = np.linalg.eigh(V)
    top = np.max(w, axis=-1, keepdims=True)
    keep = w > EIG_REL_TOL * np.maximum(top, 0.0)
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    pinv = (Q * inv[..., None, :]) @ np.swapaxes(Q, -1, -2)
    return pinv, Q, inv


def v_eps_batch(sigma2, prop, coding: CodingMatrix) -> np.ndarray:
    """``V(x_i)`` for every row, shape (n, K-1, K-1)."""
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=float))
    prop = np.atleast_2d(np.asarray(prop, dtype=float))
    if sigma2.shape != prop.shape or sigma2.shape[1] != coding.K:
        raise InvalidArgumentError(
            f"variance {sigma2.shape} and propensity {prop.shape} must both be n x {coding.K}"
        )
    if not (np.all(np.isfinite(sigma2)) and np.all(np.isfinite(prop))):
        raise InvalidArgumentError("non-finite variance or propensity")
    if np.any(prop <= 0) or np.any(sigma2 < 0):
        raise InvalidArgumentError("propensities must be positive and variances non-negative")
    W = coding.W
    weights = sigma2 / prop
    return np.einsum("nk,ka,kb->nab", weights, W, W)


def v_eps(sigma2_row, prop_row, coding: CodingMatrix) -> VEpsMatrix:
    V = v_eps_batch(sigma2_row, prop_row, coding)[0]
    V = 0.5 * (V + V.T)
    return VEpsMatrix(matrix=V, pinv=_pinv_sym(V)[0])


def efficient_instruments(A, prop, sigma2, coding: CodingMatrix) -> np.ndarray:
    """Rows ``Gram V^+(x_i) w_{a_i} / p(a_i | x_i)``, shape (n, K-1)."""
    A = np.asarray(A, dtype=int)
    V = v_eps_batch(sigma2, prop, coding)
    pinv = _pinv_sym(V)[0]
    idx = np.arange(A.shape[0])
    wa = coding.W[A - 1]
    g = np.einsum("nab,nb->na", pinv, wa) / prop[idx, A - 1][:, None]
    return g @ coding.gram.T


def _kron_rows(G: np.ndarray, Xt: np.ndarray) -> np.ndarray:
    # row i: kron(G[i], Xt[i]) with the Xt index varying fastest
    return (G[:, :, None] * Xt[:, None, :]).reshape(G.shape[0], -1)


# ---------------------------------------------------------------------------
# Estimating equation
# ---------------------------------------------------------------------------


class EfficientEquation:
    """Per-row pieces of the efficient estimating equation.

    Parameters
    ----------
    Xt : (n, d) design with intercept column first.
    A : (n,) arms in ``1..K``.
    y0 : (n,) outcome minus treatment-free prediction.
    prop, sigma2 : (n, K) propensity and working variance.
    """

    def __init__(self, Xt, A, y0, prop, sigma2, coding: CodingMatrix):
        self.Xt = np.asarray(Xt, dtype=float)
        self.A = np.asarray(A, dtype=int)
        self.y0 = np.asarray(y0, dtype=float)
        self.prop = np.asarray(prop, dtype=float)
        self.sigma2 = np.asarray(sigma2, dtype=float)
        self.coding = coding
        n, d = self.Xt.shape
        if self.A.shape != (n,) or self.y0.shape != (n,):
            raise InvalidArgumentError("design, arms and outcomes disagree in length")
        self.shape = (d, coding.K - 1)
        self.G = efficient_instruments(self.A, self.prop, self.sigma2, coding)
        self.U = _kron_rows(self.G, self.Xt)
        self.Vv = coding.scale * _kron_rows(coding.W[self.A - 1], self.Xt)

    @property
    def n(self) -> int:
        return self.Xt.shape[0]

    def _rows(self, idx):
        if idx is None:
            return self.U, self.Vv, self.y0
        return self.U[idx], self.Vv[idx], self.y0[idx]

    def jacobian(self, idx=None) -> np.ndarray:
        """``-d E_n phi / d vec(B)``; independent of the outcomes."""
        U, Vv, _ = self._rows(idx)
        return U.T @ Vv / U.shape[0]

    def rhs(self, idx=None) -> np.ndarray:
        U, _, y0 = self._rows(idx)
        return U.T @ y0 / U.shape[0]

    def residuals(self, B) -> np.ndarray:
        return self.y0 - self.Vv @ np.asarray(B, dtype=float).reshape(-1, order="F")

    def phi_rows(self, B) -> np.ndarray:
        return self.U * self.residuals(B)[:, None]

    def mean_phi(self, B, idx=None) -> np.ndarray:
        return self.rhs(idx) - self.jacobian(idx) @ np.asarray(B, dtype=float).reshape(-1, order="F")

    def quadratic(self, idx=None) -> Quadratic:
        """``1/2 ||E_n phi(B)||^2`` as a quadratic in ``vec(B)``."""
        return Quadratic.from_residual(self.jacobian(idx), self.rhs(idx), self.shape)

    def information(self) -> np.ndarray:
        """``E_n[(Gram V^+ Gram) kron xt xt^T]``."""
        V = v_eps_batch(self.sigma2, self.prop, self.coding)
        _, Q, inv = _pinv_sym(V)
        L = Q * np.sqrt(inv)[:, None, :]  # V^+ = L L^T
        L = np.einsum("ab,nbm->nam", self.coding.gram, L)
        n, km1, _ = L.shape
        Z = (L.transpose(0, 2, 1)[:, :, :, None] * self.Xt[:, None, None, :])
        Z = Z.reshape(n * km1, -1)
        return Z.T @ Z / n

    def solve(self) -> np.ndarray:
        J = self.jacobian()
        _check_conditioning(J)
        return np.linalg.solve(J, self.rhs()).reshape(self.shape, order="F")


def _check_conditioning(J):
    if not np.all(np.isfinite(J)) or np.linalg.cond(J) > COND_LIMIT:
        raise SingularSystemError(
            "estimating-equation Jacobian is singular or ill-conditioned; "
            "use a penalized fit (lambda > 0) or more data"
        )


def phi_eff(x_tilde, arm: int, y: float, B, mu0: float, prop_row, sigma2_row,
            coding: CodingMatrix) -> np.ndarray:
    """Efficient estimating function for a single observation."""
    eq = EfficientEquation(np.asarray(x_tilde, dtype=float)[None, :], [arm], [y - mu0],
                           np.asarray(prop_row, dtype=float)[None, :],
                           np.asarray(sigma2_row, dtype=float)[None, :], coding)
    return eq.phi_rows(B)[0]


def mean_phi(eq: EfficientEquation, B) -> np.ndarray:
    return eq.mean_phi(B)


def jacobian_phi(eq: EfficientEquation) -> np.ndarray:
    return eq.jacobian()


def information(eq: EfficientEquation) -> np.ndarray:
    return eq.information()


@dataclass
class SandwichVariance:
    jacobian: np.ndarray
    meat: np.ndarray
    covariance: np.ndarray = field(repr=False)

    def standard_errors(self, n: int) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None) / n)


def sandwich(eq: EfficientEquation, B) -> SandwichVariance:
    """``J^-1 E_n[phi phi^T] J^-T``: asymptotic covariance of ``sqrt(n) vec(B)``."""
    J = eq.jacobian()
    _check_conditioning(J)
    Phi = eq.phi_rows(B)
    meat = Phi.T @ Phi / eq.n
    Jinv = np.linalg.inv(J)
    cov = Jinv @ meat @ Jinv.T
    return SandwichVariance(jacobian=J, meat=meat, covariance=0.5 * (cov + cov.T))


def solve_unpenalized(eq: EfficientEquation) -> np.ndarray:
    """Root of the empirical estimating equation, as a (d, K-1) matrix."""
    return eq.solve()
