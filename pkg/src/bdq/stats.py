"""Small Monte-Carlo error helpers shared by every module."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float

    def __sub__(self, other: "Estimate") -> "Estimate":
        # independent estimates; paired differences should go through mean_se
        return Estimate(self.value - other.value, math.hypot(self.se, other.se))

    def __add__(self, other: "Estimate") -> "Estimate":
        return Estimate(self.value + other.value, math.hypot(self.se, other.se))

    def z(self, target: float = 0.0) -> float:
        d = self.value - target
        if self.se == 0:
            return 0.0 if d == 0 else math.copysign(math.inf, d)
        return d / self.se

    def __iter__(self):
        yield self.value
        yield self.se


def mean_se(x) -> Estimate:
    """Sample mean and its standard error for independent draws."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least two samples")
    return Estimate(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)))


def jackknife(x, stat=np.mean) -> Estimate:
    """Delete-one jackknife SE of ``stat`` applied to leave-one-out means.

    ``x`` has shape (n, k): n independent samples of k per-sample values.
    With ``stat`` the identity on a scalar mean it reproduces ``mean_se``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    full = float(stat(x.mean(axis=0)))
    loo_means = (x.sum(axis=0)[None, :] - x) / (n - 1)
    loo = np.array([float(stat(mu)) for mu in loo_means])
    se = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return Estimate(full, se)


def batch_means(x, n_batches: int = 20) -> Estimate:
    """SE of the mean of correlated chains via non-overlapping batches.

    ``x`` has shape (n_chains, n_draws); each chain is cut into batches.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    n_chains, n = x.shape
    b = max(1, min(n_batches, n // 2))
    size = n // b
    if size < 1:
        raise ValueError("chains too short for batch means")
    trimmed = x[:, : b * size].reshape(n_chains, b, size).mean(axis=2).ravel()
    mean = float(x.mean())
    se = float(trimmed.std(ddof=1) / math.sqrt(trimmed.size)) if trimmed.size > 1 else math.nan
    return Estimate(mean, se)


def ratio_log(weights) -> Estimate:
    """-log of the mean of positive weights with a delta-method SE."""
    w = np.asarray(weights, dtype=float).ravel()
    mu = w.mean()
    if not mu > 0:
        raise ValueError("all weights are zero")
    se = w.std(ddof=1) / (math.sqrt(w.size) * mu)
    return Estimate(float(-math.log(mu)), float(se))


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float).ravel()
    s2 = np.sum(w * w)
    return float(w.sum() ** 2 / s2) if s2 > 0 else 0.0


def gelman_rubin(x) -> float:
    """Split-R-hat for chains of shape (n_chains, n_draws)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[1] // 2
    halves = np.concatenate([x[:, :n], x[:, n: 2 * n]], axis=0)
    m = halves.shape[0]
    chain_means = halves.mean(axis=1)
    W = halves.var(axis=1, ddof=1).mean()
    B = n * chain_means.var(ddof=1)
    var_hat = (n - 1) / n * W + B / n
    return float(math.sqrt(var_hat / W)) if W > 0 else 1.0


def zscore(a: Estimate, b: Estimate) -> float:
    return (a - b).z()
