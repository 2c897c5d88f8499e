"""One-vs-rest linear SVM (hinge loss, L2 penalty) by dual coordinate descent.

This is the solver of Hsieh et al. (2008) for the L1-loss SVM, the same
algorithm liblinear runs for ``loss="hinge"``, including its shrinking
heuristic.  The bias is
handled as an extra constant feature (so it is regularized, as in liblinear
with ``intercept_scaling=1``).  Coordinates are visited in a seeded random
order, which keeps fits reproducible.
"""
from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _dcd_binary(X, y, C, tol, max_iter, seed, w):
    n, d = X.shape
    alpha = np.zeros(n)
    qd = np.empty(n)
    for i in range(n):
        s = 1.0
        for j in range(d):
            s += X[i, j] * X[i, j]
        qd[i] = s
    for j in range(d + 1):
        w[j] = 0.0
    np.random.seed(seed)
    idx = np.arange(n)
    active = n
    pg_max_old = np.inf
    pg_min_old = -np.inf
    it = 0
    while it < max_iter:
        pg_max = -np.inf
        pg_min = np.inf
        np.random.shuffle(idx[:active])
        s = 0
        while s < active:
            i = idx[s]
            g = w[d]
            for j in range(d):
                g += w[j] * X[i, j]
            g = y[i] * g - 1.0
            pg = 0.0
            if alpha[i] == 0.0:
                if g > pg_max_old:
                    # shrink: bound variable unlikely to move
                    active -= 1
                    idx[s], idx[active] = idx[active], idx[s]
                    continue
                elif g < 0.0:
                    pg = g
            elif alpha[i] == C:
                if g < pg_min_old:
                    active -= 1
                    idx[s], idx[active] = idx[active], idx[s]
                    continue
                elif g > 0.0:
                    pg = g
            else:
                pg = g
            if pg > pg_max:
                pg_max = pg
            if pg < pg_min:
                pg_min = pg
            if abs(pg) > 1e-12:
                old = alpha[i]
                a = old - g / qd[i]
                if a < 0.0:
                    a = 0.0
                elif a > C:
                    a = C
                alpha[i] = a
                delta = (a - old) * y[i]
                for j in range(d):
                    w[j] += delta * X[i, j]
                w[d] += delta
            s += 1
        it += 1
        if pg_max - pg_min <= tol:
            if active == n:
                break
            # converged on the active set: recheck everything once
            active = n
            pg_max_old = np.inf
            pg_min_old = -np.inf
            continue
        pg_max_old = pg_max if pg_max > 0.0 else np.inf
        pg_min_old = pg_min if pg_min < 0.0 else -np.inf
    return it


@numba.njit(cache=True)
def _fit_ovr(X, labels, classes, C, tol, max_iter, seed, W):
    n = X.shape[0]
    y = np.empty(n)
    iters = np.zeros(len(classes), dtype=np.int64)
    for k in range(len(classes)):
        for i in range(n):
            y[i] = 1.0 if labels[i] == classes[k] else -1.0
        iters[k] = _dcd_binary(X, y, C, tol, max_iter, seed, W[k])
    return iters


def fit_ovr(X: np.ndarray, y: np.ndarray, classes: np.ndarray, C: float = 1.0,
            tol: float = 1e-4, max_iter: int = 1000, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train one binary SVM per entry of ``classes``.

    Returns (coef (K, d), intercept (K,), passes (K,)).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    classes = np.ascontiguousarray(classes, dtype=np.int64)
    W = np.zeros((len(classes), X.shape[1] + 1))
    iters = _fit_ovr(X, y, classes, float(C), float(tol), int(max_iter), int(seed), W)
    return W[:, :-1].copy(), W[:, -1].copy(), iters
