"""Compiled inner loop of the EP sweep.

scipy.special is not callable from nopython code, so erfcx and log Phi are
rebuilt here from math.erfc plus an asymptotic tail; tests compare them with
scipy across the range the sweep uses.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_LOG_2PI = math.log(2.0 * math.pi)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_TAIL_LOG_MASS = -300.0


@njit(cache=True)
def erfcx(x):
    """exp(x^2) erfc(x) for x >= 0 (the only range used here)."""
    if x < 25.0:
        return math.exp(x * x) * math.erfc(x)
    x2 = x * x
    # asymptotic series, relative error below 1e-10 from x = 25
    return _INV_SQRT_PI / x * (1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2))


@njit(cache=True)
def log_ndtr(z):
    if z > 5.0:
        return math.log1p(-0.5 * math.erfc(z / _SQRT2))
    if z > -20.0:
        return math.log(0.5 * math.erfc(-z / _SQRT2))
    return math.log(0.5 * erfcx(-z / _SQRT2)) - 0.5 * z * z


@njit(cache=True)
def truncated_moments(mu, var, bound, upper):
    """(log_mass, mean, variance) of N(mu, var) kept on one side of bound."""
    sign = 1.0 if upper else -1.0
    sd = math.sqrt(var)
    beta = sign * (bound - mu) / sd
    if beta == math.inf:
        return 0.0, mu, var
    log_mass = log_ndtr(beta)
    if log_mass < _TAIL_LOG_MASS:
        return log_mass, bound, 0.0
    if beta < 0:
        r = _SQRT_2_OVER_PI / erfcx(-beta / _SQRT2)
    else:
        r = math.exp(-0.5 * beta * beta - 0.5 * _LOG_2PI) / (0.5 * math.erfc(-beta / _SQRT2))
    shrink = min(max(1.0 - r * (beta + r), 0.0), 1.0)
    return log_mass, mu - sign * sd * r, var * shrink


@njit(cache=True)
def ep_sweep(Sigma, mu, tau, nu, upper, c, damping, min_cav_var, min_var_ratio):
    """One sequential pass over all sites, updating Sigma, mu, tau, nu in place.

    Returns (max relative site change, skipped site count).
    """
    n = tau.shape[0]
    max_change = 0.0
    skipped = 0
    s = np.empty(n)
    for i in range(n):
        s_ii = Sigma[i, i]
        if not s_ii > 0:
            skipped += 1
            continue
        tau_cav = 1.0 / s_ii - tau[i]
        if tau_cav <= 0 or 1.0 / tau_cav < min_cav_var:
            skipped += 1
            continue
        nu_cav = mu[i] / s_ii - nu[i]
        cav_var = 1.0 / tau_cav
        _, m_hat, v_hat = truncated_moments(nu_cav * cav_var, cav_var, c, upper[i])
        v_hat = max(v_hat, cav_var * min_var_ratio)
        tau_new = 1.0 / v_hat - tau_cav
        nu_new = m_hat / v_hat - nu_cav
        if tau_new <= 0.0:
            # the factor barely touches the cavity: a flat site, not a linear one
            tau_new = 0.0
            nu_new = 0.0
        tau_new = damping * tau_new + (1.0 - damping) * tau[i]
        nu_new = damping * nu_new + (1.0 - damping) * nu[i]
        dtau = tau_new - tau[i]
        dnu = nu_new - nu[i]
        if dtau == 0.0 and dnu == 0.0:
            continue
        max_change = max(max_change, abs(dtau) / (1.0 + tau[i]), abs(dnu) / (1.0 + abs(nu[i])))
        for k in range(n):
            s[k] = Sigma[k, i]
        denom = 1.0 + dtau * s_ii
        a = (dnu - dtau * mu[i]) / denom
        b = dtau / denom
        for k in range(n):
            mu[k] += s[k] * a
        for k in range(n):
            sk = s[k] * b
            for j in range(n):
                Sigma[k, j] -= sk * s[j]
        tau[i] = tau_new
        nu[i] = nu_new
    return max_change, skipped
