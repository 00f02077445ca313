"""Compiled inner step of a virtual evaluation.

All point sets arrive pre-divided by the lengthscales, so distances are plain
Euclidean ones.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

SQRT3 = math.sqrt(3.0)


@njit(cache=True)
def _matern_column(A, n, a, variance):
    out = np.empty(n)
    d = a.shape[0]
    for i in range(n):
        s = 0.0
        for k in range(d):
            t = A[i, k] - a[k]
            s += t * t
        r = SQRT3 * math.sqrt(s)
        out[i] = variance * (1.0 + r) * math.exp(-r)
    return out


@njit(cache=True)
def _forward(L, b, n):
    # solves L x = b for the leading n x n block of a lower-triangular L
    x = np.empty(n)
    for i in range(n):
        s = b[i]
        for j in range(i):
            s -= L[i, j] * x[j]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def virtual_moments(Ab, chol, sq, alpha, Av, Lv, Wv, zv, r, a, variance):
    """Base predictive at a, then conditioning on the first r virtual points.

    Returns (w, l, base mean, base variance, mean, variance), where w are the
    whitened base features of a and l = Lv^-1 k_q(Xv, a).
    """
    nb = Ab.shape[0]
    kb = _matern_column(Ab, nb, a, variance)
    base_mean = 0.0
    scaled = np.empty(nb)
    for i in range(nb):
        base_mean += kb[i] * alpha[i]
        scaled[i] = sq[i] * kb[i]
    w = _forward(chol, scaled, nb)
    base_var = variance
    for i in range(nb):
        base_var -= w[i] * w[i]
    base_var = min(max(base_var, 0.0), variance)
    cross = _matern_column(Av, r, a, variance)
    for j in range(r):
        s = 0.0
        for i in range(nb):
            s += Wv[j, i] * w[i]
        cross[j] -= s
    l = _forward(Lv, cross, r)
    mean = base_mean
    var = base_var
    for j in range(r):
        mean += l[j] * zv[j]
        var -= l[j] * l[j]
    return w, l, base_mean, base_var, mean, var
