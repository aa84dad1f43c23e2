"""Per-round privacy budgets for noise-difference injection and plain DP.

With noise added only at initialisation, the protection a client carries at
round ``t`` is the row of ``W^t`` applied to the initial noise matrix.  The
budgets are therefore ``df / (W^t beta)`` for DP and
``df / (sqrt(2) W^t beta)`` for noise differences, element by element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .exceptions import BudgetError, ParameterError, SensitivityError
from .numerics import mat_pow

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True, eq=False)
class PrivacyParams:
    beta: np.ndarray
    delta_f: np.ndarray
    # "config" or "empirical"; echoed in every report
    sensitivity_source: str = "config"

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        df = np.atleast_1d(np.asarray(self.delta_f, dtype=np.float64))
        if b.shape != df.shape:
            b, df = np.broadcast_arrays(b, df)
        if not (np.all(b > 0) and np.all(df > 0)):
            raise ParameterError("beta and delta_f entries must be positive")
        object.__setattr__(self, "beta", np.array(b))
        object.__setattr__(self, "delta_f", np.array(df))

    @classmethod
    def uniform(cls, n: int, beta: float, delta_f: float, source="config"):
        return cls(np.full(n, beta), np.full(n, delta_f), source)


def _effective_scale(params: PrivacyParams, w, t: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (params.beta.size, params.beta.size):
        raise ParameterError(f"W is {w.shape} but there are {params.beta.size} clients")
    scale = mat_pow(w, t) @ params.beta
    if np.any(scale <= 0):
        raise BudgetError(f"W^{t} beta has non-positive entries {np.flatnonzero(scale <= 0)}")
    return scale


def budget_dp(params: PrivacyParams, w, t: int) -> np.ndarray:
    return params.delta_f / _effective_scale(params, w, t)


def budget_lppa(params: PrivacyParams, w, t: int) -> np.ndarray:
    return params.delta_f / (SQRT2 * _effective_scale(params, w, t))


@dataclass(frozen=True, eq=False)
class BudgetReport:
    epsilon_lppa: np.ndarray  # (t_max + 1, N)
    epsilon_dp: np.ndarray
    sensitivity_source: str

    def rows(self):
        """(round, client, eps_lppa, eps_dp, ratio) tuples, round-major."""
        for t in range(self.epsilon_dp.shape[0]):
            for i in range(self.epsilon_dp.shape[1]):
                lp, dp = self.epsilon_lppa[t, i], self.epsilon_dp[t, i]
                yield t, i, lp, dp, dp / lp


def budget_report(params: PrivacyParams, w, t_max: int) -> BudgetReport:
    if t_max < 0:
        raise ParameterError("t_max must be >= 0")
    lp = np.stack([budget_lppa(params, w, t) for t in range(t_max + 1)])
    dp = np.stack([budget_dp(params, w, t) for t in range(t_max + 1)])
    return BudgetReport(lp, dp, params.sensitivity_source)


def empirical_sensitivity(spec: M.ModelSpec, theta, dataset) -> float:
    """Largest L1 change of the shard gradient when one sample is left out."""
    n = len(dataset)
    if n < 2:
        raise SensitivityError("leave-one-out sensitivity needs at least two samples")
    full = M.grad_weights(spec, theta, dataset)
    y = M.one_hot(dataset.labels, spec.n_classes)
    worst = 0.0
    for s in range(n):
        keep = np.arange(n) != s
        g, _ = M.soft_grads(spec, theta, dataset.features[keep], y[keep])
        worst = max(worst, float(np.abs(full - g).sum()))
    return worst


def propagated_noise(noise, w, t: int) -> np.ndarray:
    """Rows of ``W^t @ noise``: the protection each client holds at round ``t``."""
    return mat_pow(w, t) @ np.asarray(noise, dtype=np.float64)
