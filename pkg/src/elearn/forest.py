"""Subsampled regression forest for nuisance regression.

Each tree is a CART regressor grown on a subsample drawn without
replacement, with ``mtry`` candidate features per split and at least
``min_leaf`` training points per leaf.  Predictions average leaf means, so
they always lie inside the range of the training targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.tree import DecisionTreeRegressor

from .dataio import derive_seed
from .errors import InvalidArgumentError


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 200
    min_leaf: int = 5
    mtry: Optional[int] = None  # None -> ceil(sqrt(d))
    subsample: float = 0.5
    max_depth: Optional[int] = None
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.num_trees < 1:
            raise InvalidArgumentError("num_trees must be >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise InvalidArgumentError("subsample fraction must lie in (0, 1]")
        if self.min_leaf < 1:
            raise InvalidArgumentError("min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise InvalidArgumentError("mtry must be >= 1")


@dataclass
class RegressionForest:
    trees: list
    d: int
    params: ForestParams

    def predict_many(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.d:
            raise InvalidArgumentError(
                f"forest expects {self.d} features, got array of shape {Z.shape}"
            )
        out = np.zeros(Z.shape[0])
        for tree in self.trees:
            out += tree.predict(Z)
        return out / len(self.trees)


def _grow(Z, t, rows, mtry, params, seed):
    tree = DecisionTreeRegressor(
        min_samples_leaf=params.min_leaf,
        max_features=mtry,
        max_depth=params.max_depth,
        random_state=seed % (2**32),
    )
    return tree.fit(Z[rows], t[rows])


def fit_forest(Z, t, params: ForestParams = ForestParams()) -> RegressionForest:
    """Grow ``params.num_trees`` trees; deterministic given ``params.seed``."""
    Z = np.asarray(Z, dtype=float)
    t = np.asarray(t, dtype=float).ravel()
    if Z.ndim != 2 or Z.shape[0] != t.shape[0]:
        raise InvalidArgumentError(f"features {Z.shape} and targets {t.shape} disagree")
    n, d = Z.shape
    if n < 2 * params.min_leaf:
        raise InvalidArgumentError(
            f"forest needs at least {2 * params.min_leaf} rows, got {n}"
        )
    mtry = params.mtry if params.mtry is not None else math.ceil(math.sqrt(d))
    mtry = min(mtry, d)
    m = max(2 * params.min_leaf, int(math.ceil(params.subsample * n)))
    m = min(m, n)
    jobs = []
    for b in range(params.num_trees):
        seed = derive_seed(params.seed, b)
        rows = np.random.default_rng(seed).choice(n, size=m, replace=False)
        jobs.append((rows, seed))
    if params.n_jobs != 1:
        from joblib import Parallel, delayed

        trees = Parallel(n_jobs=params.n_jobs, prefer="threads")(
            delayed(_grow)(Z, t, rows, mtry, params, seed) for rows, seed in jobs
        )
    else:
        trees = [_grow(Z, t, rows, mtry, params, seed) for rows, seed in jobs]
    return RegressionForest(trees=list(trees), d=d, params=params)


def predict(forest: RegressionForest, z) -> float:
    """Prediction at a single feature vector."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.shape[0] != forest.d:
        raise InvalidArgumentError(f"forest expects a {forest.d}-vector, got shape {z.shape}")
    return float(forest.predict_many(z[None, :])[0])
