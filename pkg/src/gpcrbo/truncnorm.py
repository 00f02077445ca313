"""Scalar Gaussian helpers and one-sided truncated-normal moments."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

LOG_2PI = math.log(2.0 * math.pi)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
# below this log-mass the truncated density is treated as a point mass at the bound
TAIL_LOG_MASS = -300.0


class Side(enum.Enum):
    UPPER = "upper"  # f <= bound
    LOWER = "lower"  # f >= bound


@dataclass(frozen=True)
class TruncatedMoments:
    log_mass: float
    mean: float
    variance: float


def norm_pdf(z):
    return np.exp(-0.5 * np.square(z) - 0.5 * LOG_2PI)


def norm_cdf(z):
    return special.ndtr(z)


def norm_log_cdf(z):
    """log Phi(z), finite far into the lower tail (asymptotic series below z=-20)."""
    return special.log_ndtr(z)


def inverse_mills(beta):
    """phi(beta) / Phi(beta) without overflow for very negative beta.

    For beta < 0 this uses Phi(beta) = erfcx(-beta/sqrt2) * exp(-beta^2/2) / 2,
    which cancels the Gaussian factor analytically.
    """
    beta = np.asarray(beta, dtype=float)
    neg = beta < 0
    out = np.empty_like(beta)
    out[neg] = SQRT_2_OVER_PI / special.erfcx(-beta[neg] / math.sqrt(2.0))
    pos = ~neg
    out[pos] = norm_pdf(beta[pos]) / special.ndtr(beta[pos])
    return out


def truncated_moments(mu: float, var: float, bound: float, side: Side) -> TruncatedMoments:
    """Mass, mean and variance of N(mu, var) restricted to one side of ``bound``."""
    if not var > 0:
        raise ValueError(f"variance must be positive, got {var}")
    side = Side(side)
    lm, m, v = truncated_moments_arrays(
        np.array([mu], float), np.array([var], float), np.array([bound], float), side is Side.UPPER
    )
    return TruncatedMoments(float(lm[0]), float(m[0]), float(v[0]))


def truncated_moments_arrays(mu, var, bound, upper):
    """Vectorized truncated moments.

    ``upper`` is a bool (or bool array): True keeps f <= bound, False keeps
    f >= bound. Returns (log_mass, mean, variance) arrays.
    """
    mu, var, bound = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu, var, bound)))
    sign = np.where(np.broadcast_to(upper, mu.shape), 1.0, -1.0)
    sd = np.sqrt(var)
    with np.errstate(invalid="ignore"):
        # Lower truncation is the Upper case for -f, so work with a signed beta.
        beta = sign * (bound - mu) / sd
    beta = np.where(np.isnan(beta), np.inf, beta)
    log_mass = norm_log_cdf(beta)
    finite = np.isfinite(beta)
    r = np.zeros_like(beta)
    r[finite] = inverse_mills(beta[finite])
    mean = mu - sign * sd * r
    # 1 - beta*r - r^2 written as 1 - r*(beta + r) to limit cancellation in the tail
    shrink = np.where(finite, 1.0 - r * (beta + r), 1.0)
    variance = var * np.clip(shrink, 0.0, 1.0)
    deep = log_mass < TAIL_LOG_MASS
    if np.any(deep):
        mean = np.where(deep, bound, mean)
        variance = np.where(deep, 0.0, variance)
    return log_mass, mean, variance


def truncated_moments_scalar(mu: float, var: float, bound: float, upper: bool) -> tuple[float, float, float]:
    """Plain-float version of truncated_moments_arrays for hot inner loops."""
    sign = 1.0 if upper else -1.0
    sd = math.sqrt(var)
    beta = sign * (bound - mu) / sd
    if beta == math.inf:
        return 0.0, mu, var
    log_mass = float(special.log_ndtr(beta))
    if log_mass < TAIL_LOG_MASS:
        return log_mass, bound, 0.0
    if beta < 0:
        r = SQRT_2_OVER_PI / float(special.erfcx(-beta / math.sqrt(2.0)))
    else:
        r = math.exp(-0.5 * beta * beta - 0.5 * LOG_2PI) / float(special.ndtr(beta))
    shrink = min(max(1.0 - r * (beta + r), 0.0), 1.0)
    return log_mass, mu - sign * sd * r, var * shrink
