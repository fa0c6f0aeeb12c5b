"""Value estimation, regret bounds and per-method benchmark summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import ELearnError, InvalidArgumentError


def ipwe_arrays(A, Y, arms, prop) -> float:
    """``mean(1[arms == A] * Y / p(A | X))`` on raw arrays."""
    A = np.asarray(A, dtype=int)
    Y = np.asarray(Y, dtype=float)
    arms = np.asarray(arms, dtype=int).ravel()
    prop = np.asarray(prop, dtype=float)
    if arms.shape != A.shape or prop.shape[0] != A.shape[0]:
        raise InvalidArgumentError("rule, arms and propensity disagree in length")
    if A.size == 0:
        raise InvalidArgumentError("IPWE needs at least one observation")
    pa = prop[np.arange(A.size), A - 1]
    return float(np.mean((arms == A) * Y / pa))


def ipwe_value(data, rule, propensity) -> float:
    """Inverse-probability-weighted value of ``rule`` on ``data``.

    ``rule`` is either an array of 1-based arms or a callable mapping the
    covariate matrix to arms.
    """
    arms = rule(data.X) if callable(rule) else rule
    return ipwe_arrays(data.A, data.Y, arms, propensity)


class BoundViolation(ELearnError, AssertionError):
    pass


class RegretBound(NamedTuple):
    regret: float
    bound: float
    se: float

    @property
    def holds(self) -> bool:
        return self.regret <= self.bound + 3.0 * self.se


def regret_bound_details(effects_fn: Callable, scenario, test_size: int = 10000,
                         rng: Optional[np.random.Generator] = None) -> RegretBound:
    """Monte-Carlo regret of the rule ``argmax effects_fn(X)`` and its bound.

    The bound is ``2 max_k E|gamma_hat_k - gamma_k|``; ``se`` combines the
    Monte-Carlo standard errors of both sides.
    """
    if test_size < 2:
        raise InvalidArgumentError("test_size must be >= 2")
    if rng is None:
        rng = np.random.default_rng(scenario.seed)
    X = rng.standard_normal((test_size, scenario.p))
    gamma = scenario.effects(X)
    gamma_hat = np.asarray(effects_fn(X), dtype=float)
    idx = np.arange(test_size)
    chosen = np.argmax(gamma_hat, axis=1)
    loss = gamma.max(axis=1) - gamma[idx, chosen]
    dev = np.abs(gamma_hat - gamma)
    k = int(np.argmax(dev.mean(axis=0)))
    regret = float(loss.mean())
    bound = 2.0 * float(dev[:, k].mean())
    se = math.sqrt(loss.var(ddof=1) / test_size + 4.0 * dev[:, k].var(ddof=1) / test_size)
    return RegretBound(regret, bound, se)


def regret_bound_check(effects_fn: Callable, scenario, test_size: int = 10000,
                       rng: Optional[np.random.Generator] = None,
                       strict: bool = True) -> tuple[float, float]:
    """``(regret, bound)``; raises :class:`BoundViolation` when the regret
    exceeds the bound by more than three standard errors and ``strict``."""
    res = regret_bound_details(effects_fn, scenario, test_size, rng)
    if strict and not res.holds:
        raise BoundViolation(
            f"regret {res.regret:.4g} exceeds bound {res.bound:.4g} + 3*{res.se:.3g}"
        )
    return res.regret, res.bound


@dataclass
class EvalReport:
    """Replication-level metrics for one (scenario, method) pair."""

    method: str
    scenario: dict
    regret: list = field(default_factory=list)
    misclass: list = field(default_factory=list)
    ipwe: list = field(default_factory=list)
    failures: int = 0
    errors: list = field(default_factory=list)

    def add(self, regret: float, misclass: float, ipwe: float) -> None:
        if not 0.0 <= misclass <= 1.0:
            raise InvalidArgumentError(f"misclassification {misclass} outside [0, 1]")
        self.regret.append(float(regret))
        self.misclass.append(float(misclass))
        self.ipwe.append(float(ipwe))

    def fail(self, message: str) -> None:
        self.failures += 1
        self.errors.append(message)

    @property
    def replications(self) -> int:
        return len(self.regret)

    @staticmethod
    def _mean_se(values) -> tuple[float, float]:
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            return float("nan"), float("nan")
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
        return float(v.mean()), se

    def summary(self) -> dict:
        out = {"method": self.method, "scenario": self.scenario,
               "replications": self.replications, "failures": self.failures}
        for name in ("regret", "misclass", "ipwe"):
            m, s = self._mean_se(getattr(self, name))
            out[f"{name}_mean"] = m
            out[f"{name}_se"] = s
        return out
