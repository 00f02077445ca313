"""Expectation propagation for a Gaussian restricted to an orthant-like box.

The target density is ``N(f | m, S) * prod_i H(+-(c - f_i))``: every coordinate
carries one Heaviside factor, either ``f_i <= c`` (stable) or ``f_i >= c``
(unstable), all at a shared threshold ``c``. The Gaussian part comes from
folding the real-valued observations into the prior (see ``tilted_base``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from ._sweep import ep_sweep
from .kernels import NoiseSpec, cholesky_with_jitter, chol_solve
from .truncnorm import LOG_2PI, truncated_moments_scalar


# smallest matched variance relative to the cavity variance (deep-tail floor)
MIN_VARIANCE_RATIO = 1e-6
# variance used for coordinates that are (numerically) deterministic
DEGENERATE_VARIANCE = 1e-30


class SiteDirection(enum.Enum):
    STABLE = "stable"  # H(c - f_i)
    UNSTABLE = "unstable"  # H(f_i - c)


@dataclass(frozen=True)
class TiltedBase:
    """Unnormalized Gaussian ``exp(log_norm) * N(f | mean, covariance)``."""

    mean: np.ndarray
    covariance: np.ndarray
    log_norm: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class EPConfig:
    tolerance: float = 1e-6
    max_sweeps: int = 50
    damping: float = 0.8
    min_cavity_variance: float = 1e-10

    def __post_init__(self):
        if not self.tolerance > 0 or self.max_sweeps < 1:
            raise ValueError("tolerance must be positive and max_sweeps >= 1")
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if not self.min_cavity_variance > 0:
            raise ValueError("min_cavity_variance must be positive")


@dataclass(frozen=True)
class EPResult:
    mean: np.ndarray
    covariance: np.ndarray
    log_mass: float
    converged: bool
    sweeps_used: int
    # natural parameters of the Gaussian sites (precision, precision * mean)
    site_precision: np.ndarray = field(repr=False)
    site_shift: np.ndarray = field(repr=False)
    skipped_updates: int = 0


def tilted_base(K: np.ndarray, y_s, noise: NoiseSpec, n_stable: int, noise_scale=None) -> TiltedBase:
    """Fold ``N(y_s | f_s, noise^2 I)`` into the prior ``N(f | 0, K)``.

    The stable points must occupy the first ``n_stable`` indices of ``K``.
    The result has precision ``K^-1 + blockdiag(noise^-2 I, 0)``; it is computed
    by ordinary GP conditioning, which never inverts the noise-free ``K``.
    ``log_norm`` is ``log N(y_s | 0, K_ss + noise^2 I)``. ``noise_scale``
    optionally multiplies the noise std of individual stable points.
    """
    K = np.asarray(K, dtype=float)
    y_s = np.asarray(y_s, dtype=float).reshape(-1)
    n = K.shape[0]
    if K.shape != (n, n) or y_s.shape[0] != n_stable or n_stable > n:
        raise ValueError(f"inconsistent shapes: K {K.shape}, {y_s.shape[0]} observations, n_stable={n_stable}")
    if n_stable == 0:
        return TiltedBase(np.zeros(n), K.copy(), 0.0)
    Kxs = K[:, :n_stable]
    A = K[:n_stable, :n_stable] + np.diag(stable_noise_variance(noise, n_stable, noise_scale))
    L, _ = cholesky_with_jitter(A)
    alpha = chol_solve(L, y_s)
    mean = Kxs @ alpha
    V = linalg.solve_triangular(L, Kxs.T, lower=True, check_finite=False)
    cov = K - V.T @ V
    cov = 0.5 * (cov + cov.T)
    log_norm = -0.5 * y_s @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n_stable * LOG_2PI
    return TiltedBase(mean, cov, float(log_norm))


def stable_noise_variance(noise: NoiseSpec, n_stable: int, noise_scale=None) -> np.ndarray:
    var = np.full(n_stable, noise.variance)
    if noise_scale is not None:
        var = var * np.asarray(noise_scale, dtype=float) ** 2
    return var


def _posterior(S, m, tau, nu):
    """Gaussian proportional to N(f|m,S) * exp(-tau f^2/2 + nu f), plus bookkeeping.

    Uses B = I + T^1/2 S T^1/2 so that S is never inverted. Returns
    (Sigma, mu, logdet_B, L).
    """
    sq = np.sqrt(tau)
    B = np.eye(len(m)) + sq[:, None] * S * sq[None, :]
    L = linalg.cholesky(B, lower=True, check_finite=False)
    V = linalg.solve_triangular(L, sq[:, None] * S, lower=True, check_finite=False)
    Sigma = S - V.T @ V
    Sigma = 0.5 * (Sigma + Sigma.T)
    w = linalg.solve_triangular(L, sq * m, lower=True, check_finite=False)
    mu = m - V.T @ w + Sigma @ nu
    return Sigma, mu, 2.0 * np.sum(np.log(np.diag(L))), L


def _log_mass(base: TiltedBase, upper, threshold, Sigma, mu, tau, nu, logdet_B, L) -> float:
    """EP estimate of the log truncated mass, base normalizer included.

    Written with site means ``nu/tau`` and the products ``tau * cavity_var`` so
    that no term grows with the site precision; a site pinned deep in a tail
    (precision -> inf) then contributes only bounded quantities.
    """
    s_diag = np.diag(Sigma)
    total = base.log_norm - 0.5 * logdet_B
    active = tau > 0
    site_mean = np.zeros_like(tau)
    site_mean[active] = nu[active] / tau[active]
    w = np.sqrt(tau) * (site_mean - base.mean)
    w[~active] = 0.0
    z = linalg.solve_triangular(L, w, lower=True, check_finite=False)
    total -= 0.5 * z @ z
    for i in range(len(tau)):
        tau_cav = 1.0 / s_diag[i] - tau[i] if s_diag[i] > 0 else 0.0
        if not (tau_cav > 0 and math.isfinite(tau_cav)):
            # degenerate cavity: score the factor against the base marginal
            var = max(base.covariance[i, i], DEGENERATE_VARIANCE)
            log_z, _, _ = truncated_moments_scalar(base.mean[i], var, threshold, upper[i])
            total += log_z
            continue
        cav_var = 1.0 / tau_cav
        cav_mean = (mu[i] / s_diag[i] - nu[i]) * cav_var
        log_z, _, _ = truncated_moments_scalar(cav_mean, cav_var, threshold, upper[i])
        total += log_z
        if active[i]:
            ratio = tau[i] * cav_var
            total += 0.5 * math.log1p(ratio)
            total += 0.5 * tau[i] * (cav_mean - site_mean[i]) ** 2 / (1.0 + ratio)
    return float(total)


def ep_box_posterior(
    base: TiltedBase,
    directions: Sequence[SiteDirection],
    threshold: float,
    config: EPConfig | None = None,
    init_sites: tuple[np.ndarray, np.ndarray] | None = None,
) -> EPResult:
    """Sequential damped EP over one Heaviside factor per coordinate.

    ``init_sites`` warm-starts the site parameters, e.g. from a solve at a
    nearby threshold. A site whose cavity variance drops below
    ``config.min_cavity_variance`` is skipped for that sweep.
    """
    config = config or EPConfig()
    n = len(directions)
    if n != base.dim:
        raise ValueError(f"{n} directions for a base of dimension {base.dim}")
    if n == 0:
        return EPResult(base.mean, base.covariance, base.log_norm, True, 0, np.zeros(0), np.zeros(0))
    upper = np.array([SiteDirection(d) is SiteDirection.STABLE for d in directions])
    c = float(threshold)
    m, S = base.mean, base.covariance
    if init_sites is None:
        tau, nu = np.zeros(n), np.zeros(n)
    else:
        tau, nu = (np.array(a, dtype=float) for a in init_sites)
    Sigma, mu, logdet_B, L = _posterior(S, m, tau, nu)
    d = config.damping
    converged = False
    skipped = 0
    sweeps = 0
    for sweeps in range(1, config.max_sweeps + 1):
        Sigma = np.ascontiguousarray(Sigma)
        max_change, n_skip = ep_sweep(
            Sigma, mu, tau, nu, upper, c, d, config.min_cavity_variance, MIN_VARIANCE_RATIO
        )
        skipped += n_skip
        Sigma, mu, logdet_B, L = _posterior(S, m, tau, nu)
        if max_change < config.tolerance:
            converged = True
            break
    log_mass = _log_mass(base, upper, c, Sigma, mu, tau, nu, logdet_B, L)
    return EPResult(mu, Sigma, log_mass, converged, sweeps, tau, nu, skipped)


def log_mass_at(
    threshold: float,
    base: TiltedBase,
    directions: Sequence[SiteDirection],
    config: EPConfig | None = None,
) -> float:
    """log F(c): EP estimate of the log marginal likelihood at threshold ``c``."""
    return ep_box_posterior(base, directions, threshold, config).log_mass
