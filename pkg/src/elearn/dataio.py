"""Datasets, covariate preprocessing, CSV ingestion and the simulation design.

The simulation follows the heteroscedastic partially linear design used to
benchmark the learners: standard normal covariates, softmax-type assignment
probabilities, a treatment-free effect that is either linear or a sum of
exponentials, and an arm-dependent noise scale.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError, InvalidArgumentError

ARM_COLUMN = "a"
OUTCOME_COLUMN = "y"


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Covariates ``X`` (n x p), arms ``A`` in ``1..K`` and outcomes ``Y``."""

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    K: int

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.A = np.asarray(self.A).astype(int).ravel()
        self.Y = np.asarray(self.Y, dtype=float).ravel()
        self.K = int(self.K)
        n = self.X.shape[0]
        if self.A.shape[0] != n or self.Y.shape[0] != n:
            raise DataError(
                f"inconsistent sample sizes: X has {n} rows, A has {self.A.shape[0]}, "
                f"Y has {self.Y.shape[0]}"
            )
        if self.K < 2:
            raise DataError(f"need at least two arms, got K={self.K}")
        bad = np.flatnonzero((self.A < 1) | (self.A > self.K))
        if bad.size:
            raise DataError(
                f"arm label {self.A[bad[0]]} at row {bad[0] + 1} outside 1..{self.K}"
            )
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise DataError("covariates and outcomes must be finite")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.A[idx], self.Y[idx], self.K)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.K == other.K
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.Y, other.Y)
        )


# ---------------------------------------------------------------------------
# Standardization and basis expansion
# ---------------------------------------------------------------------------


@dataclass
class Standardizer:
    """Per-column centering and scaling (population standard deviation)."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        # constant columns are left unscaled
        scale = np.where(scale > 1e-12 * np.maximum(1.0, np.abs(mean)), scale, 1.0)
        return cls(mean=mean, scale=scale)

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.mean.shape[0]:
            raise InvalidArgumentError(
                f"expected {self.mean.shape[0]} columns, got {X.shape[-1]}"
            )
        return (X - self.mean) / self.scale

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(mean=np.asarray(d["mean"], float), scale=np.asarray(d["scale"], float))


def poly_expand(X, degree: int) -> np.ndarray:
    """Per-column polynomial basis: ``(x_j, x_j^2, x_j^3)`` for degree 3."""
    X = np.asarray(X, dtype=float)
    if degree == 1:
        return X
    if degree == 3:
        n, p = X.shape
        out = np.empty((n, 3 * p))
        out[:, 0::3] = X
        out[:, 1::3] = X**2
        out[:, 2::3] = X**3
        return out
    raise InvalidArgumentError(f"basis degree must be 1 or 3, got {degree!r}")


def add_intercept(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    return np.hstack([np.ones((Z.shape[0], 1)), Z])


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_csv(dataset: Dataset, path) -> None:
    """Write ``x1..xp, a, y`` with shortest round-trip float formatting."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(dataset.p)] + [ARM_COLUMN, OUTCOME_COLUMN])
        for i in range(dataset.n):
            w.writerow(
                [repr(float(v)) for v in dataset.X[i]]
                + [str(int(dataset.A[i])), repr(float(dataset.Y[i]))]
            )


def _parse_cell(text: str, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"non-numeric value {text!r} at row {row}, column {col!r}") from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value {text!r} at row {row}, column {col!r}")
    return value


def read_table(path, required: Sequence[str] = ()) -> tuple[list[str], np.ndarray]:
    """Read a headed numeric CSV; rows are numbered from 1 after the header."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        for name in required:
            if name not in header:
                raise DataError(f"{path} has no column {name!r}")
        rows = []
        for r, raw in enumerate(reader, start=1):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise DataError(
                    f"row {r} has {len(raw)} cells, expected {len(header)}"
                )
            vals = []
            for c, (name, cell) in enumerate(zip(header, raw)):
                if not cell.strip():
                    raise DataError(f"missing value at row {r}, column {name!r}")
                vals.append(_parse_cell(cell.strip(), r, name))
            rows.append(vals)
    if not rows:
        raise DataError(f"{path} has no data rows")
    return header, np.asarray(rows, dtype=float)


def read_csv(path, K: Optional[int] = None, arm_col: str = ARM_COLUMN,
             outcome_col: str = OUTCOME_COLUMN) -> Dataset:
    """Read a dataset; every column other than arm and outcome is a covariate."""
    header, table = read_table(path, required=(arm_col, outcome_col))
    ia, iy = header.index(arm_col), header.index(outcome_col)
    cov = [j for j in range(len(header)) if j not in (ia, iy)]
    arms = table[:, ia]
    nonint = np.flatnonzero(arms != np.round(arms))
    if nonint.size:
        raise DataError(f"non-integer arm label {arms[nonint[0]]} at row {nonint[0] + 1}")
    arms = arms.astype(int)
    if K is None:
        K = int(arms.max())
    bad = np.flatnonzero((arms < 1) | (arms > K))
    if bad.size:
        raise DataError(f"arm label {arms[bad[0]]} at row {bad[0] + 1} outside 1..{K}")
    return Dataset(X=table[:, cov], A=arms, Y=table[:, iy], K=max(K, 2))


def read_covariates(path, p: Optional[int] = None) -> np.ndarray:
    """Covariate columns of a CSV (arm/outcome columns, if present, are dropped)."""
    header, table = read_table(path)
    cov = [j for j, h in enumerate(header) if h not in (ARM_COLUMN, OUTCOME_COLUMN)]
    X = table[:, cov]
    if p is not None and X.shape[1] != p:
        raise DataError(f"{path} has {X.shape[1]} covariates, model expects {p}")
    return X


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def derive_seed(master: int, *keys: int) -> int:
    """Hash ``(master, keys...)`` into an independent 63-bit seed."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based Philox generator for stream ``keys`` of ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


# streams drawn from one scenario seed
_STREAM_COEF, _STREAM_TRAIN, _STREAM_TEST = 0, 1, 2


# ---------------------------------------------------------------------------
# Scenario and simulation
# ---------------------------------------------------------------------------


def draw_coefficients(K: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """Interaction coefficients ``beta`` (K x (p+1)), intercept in column 0.

    Each arm's first six coefficients are uniform on the unit sphere in R^6;
    they are centered across arms and the remaining ``p - 5`` are zero.
    """
    if p < 5:
        raise InvalidArgumentError(f"need p >= 5 covariates, got {p}")
    if K < 2:
        raise InvalidArgumentError(f"need K >= 2 arms, got {K}")
    raw = rng.standard_normal((K, 6))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    raw -= raw.mean(axis=0, keepdims=True)
    beta = np.zeros((K, p + 1))
    beta[:, :6] = raw
    return beta


@dataclass
class Scenario:
    """One cell of the simulation design."""

    n: int
    p: int
    K: int
    tf_misspec: bool = False
    heteroscedastic: bool = False
    prop_misspec: bool = False
    seed: int = 0
    beta: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.p < 5:
            raise InvalidArgumentError(f"scenario needs p >= 5, got {self.p}")
        if not 2 <= self.K <= self.p:
            raise InvalidArgumentError(f"scenario needs 2 <= K <= p, got K={self.K}")
        if self.n < 1:
            raise InvalidArgumentError(f"scenario needs n >= 1, got {self.n}")
        if self.beta is None:
            self.beta = draw_coefficients(self.K, self.p, make_rng(self.seed, _STREAM_COEF))
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.shape != (self.K, self.p + 1):
            raise InvalidArgumentError(
                f"beta must be {self.K} x {self.p + 1}, got {self.beta.shape}"
            )
        if np.any(np.abs(self.beta.sum(axis=0)) > 1e-10):
            raise InvalidArgumentError("beta must sum to zero across arms")
        if np.any(self.beta[:, 6:] != 0.0):
            raise InvalidArgumentError("only the intercept and first 5 slopes may be nonzero")

    def with_seed(self, seed: int) -> "Scenario":
        """Same cell, new seed (and freshly drawn coefficients)."""
        return Scenario(self.n, self.p, self.K, self.tf_misspec, self.heteroscedastic,
                        self.prop_misspec, seed)

    @property
    def label(self) -> str:
        return (
            f"tf={'mis' if self.tf_misspec else 'ok'},"
            f"var={'het' if self.heteroscedastic else 'hom'},"
            f"prop={'mis' if self.prop_misspec else 'ok'}"
        )

    # -- truths -------------------------------------------------------------

    def mu0(self, X) -> np.ndarray:
        """Centered treatment-free effect ``mu0(x) - E mu0(X)``."""
        X = np.asarray(X, dtype=float)
        lead = X[:, : self.K]
        if self.tf_misspec:
            # E exp(sqrt(2) Z) = e for Z ~ N(0, 1)
            return np.exp(np.sqrt(2.0) * lead).mean(axis=1) - np.e
        return lead.sum(axis=1) / np.sqrt(self.K)

    def propensity(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        lead = X[:, : self.K]
        e = np.sqrt(np.abs(lead)) if self.prop_misspec else np.exp(lead / 2.0)
        return e / e.sum(axis=1, keepdims=True)

    def sigma2(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.heteroscedastic:
            return np.exp(2.0 * np.sqrt(2.0) * X[:, : self.K])
        return np.ones((X.shape[0], self.K))

    def effects(self, X) -> np.ndarray:
        """True interaction effects ``beta_k^T (1, x)``, shape (n, K)."""
        X = np.asarray(X, dtype=float)
        return add_intercept(X) @ self.beta.T

    def optimal_rule(self, X) -> np.ndarray:
        return np.argmax(self.effects(X), axis=1) + 1

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta"] = self.beta.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        if d.get("beta") is not None:
            d["beta"] = np.asarray(d["beta"], dtype=float)
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


def _draw_arms(prob: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(prob.shape[0])
    cum = np.cumsum(prob, axis=1)
    arms = (u[:, None] >= cum[:, :-1]).sum(axis=1) + 1
    return arms


def simulate(scenario: Scenario, n: Optional[int] = None,
             rng: Optional[np.random.Generator] = None) -> Dataset:
    """Draw a training set from ``scenario`` (deterministic given its seed)."""
    n = scenario.n if n is None else int(n)
    if rng is None:
        rng = make_rng(scenario.seed, _STREAM_TRAIN)
    X = rng.standard_normal((n, scenario.p))
    A = _draw_arms(scenario.propensity(X), rng)
    idx = np.arange(n)
    noise = rng.standard_normal(n)
    Y = (
        scenario.mu0(X)
        + scenario.effects(X)[idx, A - 1]
        + np.sqrt(scenario.sigma2(X)[idx, A - 1]) * noise
    )
    return Dataset(X=X, A=A, Y=Y, K=scenario.K)


def oracle_regret_and_misclass(scenario: Scenario, rule: Callable[[np.ndarray], np.ndarray],
                               m: int = 10000,
                               rng: Optional[np.random.Generator] = None) -> tuple[float, float]:
    """Test-set regret ``V(d*) - V(d)`` and disagreement rate with ``d*``.

    ``rule`` maps an (m x p) covariate matrix to 1-based arms.
    """
    if m < 1:
        raise InvalidArgumentError(f"test size must be >= 1, got {m}")
    if rng is None:
        rng = make_rng(scenario.seed, _STREAM_TEST)
    X = rng.standard_normal((m, scenario.p))
    gamma = scenario.effects(X)
    best = np.argmax(gamma, axis=1)
    chosen = np.asarray(rule(X)).astype(int).ravel() - 1
    idx = np.arange(m)
    regret = float(np.mean(gamma[idx, best]) - np.mean(gamma[idx, chosen]))
    misclass = float(np.mean(chosen != best))
    return regret, misclass
