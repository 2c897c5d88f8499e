"""Small statistics helpers shared by the experiment modules."""
from __future__ import annotations

import numpy as np
from scipy import stats

Z95 = 1.959963984540054


def wald_ci(p, n, z: float = Z95):
    """Normal-approximation interval for a proportion (clipped to [0, 1]).

    ``n`` may be an array matching ``p``; entries with n <= 0 get [0, 1].
    """
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        half = np.where(n > 0, z * np.sqrt(p * (1.0 - p) / np.maximum(n, 1)), np.inf)
    return np.clip(p - half, 0.0, 1.0), np.clip(p + half, 0.0, 1.0)


def mean_ci(x, z: float = Z95) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval of the mean of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    m = float(x.mean())
    if x.size < 2:
        return m, m, m
    half = z * float(x.std(ddof=1)) / np.sqrt(x.size)
    return m, m - half, m + half


def two_proportion_test(k1: int, n1: int, k2: int, n2: int) -> tuple[float, float]:
    """Pooled two-sided z-test for equal proportions; returns (z, p_value)."""
    if n1 == 0 or n2 == 0:
        return 0.0, 1.0
    p1, p2 = k1 / n1, k2 / n2
    pool = (k1 + k2) / (n1 + n2)
    se = np.sqrt(pool * (1 - pool) * (1 / n1 + 1 / n2))
    if se == 0:
        return 0.0, 1.0
    z = (p1 - p2) / se
    return float(z), float(2 * stats.norm.sf(abs(z)))


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)
