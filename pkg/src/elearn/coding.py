"""Equiangular arm coding and the angle-based representation of effects.

Arms are labelled ``1..K``.  Arm ``k`` is represented by a unit vector
``w_k`` in ``R^{K-1}``; the vectors sum to zero and have pairwise inner
product ``-1/(K-1)``.  An ``R^{K-1}``-valued decision function ``f`` induces
the interaction effects ``gamma_k = (1 - 1/K) <w_k, f>`` and the rule
``argmax_k <w_k, f>``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class CodingMatrix:
    """K equiangular unit vectors stored row-wise in ``W`` (K x (K-1))."""

    K: int
    W: np.ndarray

    @property
    def omega(self) -> np.ndarray:
        """Scaled coding ``sqrt(1 - 1/K) * W``."""
        return np.sqrt(1.0 - 1.0 / self.K) * self.W

    @property
    def gram(self) -> np.ndarray:
        """``Omega^T Omega``; the identity for unit-norm equiangular rows."""
        om = self.omega
        return om.T @ om

    @property
    def scale(self) -> float:
        """The factor ``1 - 1/K`` linking ``<w_k, f>`` to ``gamma_k``."""
        return 1.0 - 1.0 / self.K


def _helmert_complement(K: int) -> np.ndarray:
    # Columns: orthonormal basis of the complement of the all-ones vector.
    H = np.zeros((K, K - 1))
    for j in range(1, K):
        H[:j, j - 1] = 1.0
        H[j, j - 1] = -float(j)
        H[:, j - 1] /= np.sqrt(j * (j + 1.0))
    return H


def build_coding(K: int) -> CodingMatrix:
    """Deterministic equiangular coding for ``K >= 2`` arms.

    For ``K = 2`` this is the sign coding: arm 1 -> +1, arm 2 -> -1.
    """
    if int(K) != K or K < 2:
        raise InvalidArgumentError(f"arm count K must be an integer >= 2, got {K!r}")
    K = int(K)
    H = _helmert_complement(K)
    W = H / np.linalg.norm(H, axis=1, keepdims=True)
    W.setflags(write=False)
    return CodingMatrix(K=K, W=W)


def _check_f(f, coding: CodingMatrix) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim == 0 or f.shape[-1] != coding.K - 1:
        raise InvalidArgumentError(
            f"decision vector must have trailing dimension K-1={coding.K - 1}, "
            f"got shape {f.shape}"
        )
    return f


def interaction_effects(f, coding: CodingMatrix) -> np.ndarray:
    """``gamma_k = (1 - 1/K) <w_k, f>``; accepts a vector or an (n, K-1) batch."""
    f = _check_f(f, coding)
    return coding.scale * (f @ coding.W.T)


def decision_from_effects(gamma, coding: CodingMatrix) -> np.ndarray:
    """Invert :func:`interaction_effects`: ``f = (Omega^T Omega)^{-1} sum_k gamma_k w_k``."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape[-1] != coding.K:
        raise InvalidArgumentError(
            f"effects must have trailing dimension K={coding.K}, got {gamma.shape}"
        )
    return np.linalg.solve(coding.gram, (gamma @ coding.W).T).T


def decide(f, coding: CodingMatrix):
    """Arm (1-based) maximizing ``<w_k, f>``; ties go to the lowest index.

    Returns an int for a single vector and an int array for a batch.
    """
    f = _check_f(f, coding)
    scores = f @ coding.W.T
    top = scores.max(axis=-1, keepdims=True)
    # scores within rounding of the maximum count as ties
    tol = _TIE_RTOL * np.maximum(1.0, np.abs(scores).max(axis=-1, keepdims=True))
    arms = np.argmax(scores >= top - tol, axis=-1) + 1
    if np.ndim(arms) == 0:
        return int(arms)
    return arms


def coefficients_from_arm_effects(beta, coding: CodingMatrix) -> np.ndarray:
    """Map per-arm linear effects to the decision coefficient matrix.

    ``beta`` is K x d with rows summing to zero across arms, so that
    ``gamma_k(x) = beta_k^T x``.  Returns ``B`` (d x (K-1)) with
    ``(1 - 1/K) <w_k, B^T x> = beta_k^T x``.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 2 or beta.shape[0] != coding.K:
        raise InvalidArgumentError(f"beta must be K x d with K={coding.K}, got {beta.shape}")
    return decision_from_effects(beta.T, coding)
