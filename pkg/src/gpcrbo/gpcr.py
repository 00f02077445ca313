"""Gaussian process for classified regression (GPCR).

Stable inputs carry noisy real observations that must lie below an unknown
threshold ``c``; unstable inputs only carry the label "above ``c``". The
posterior over latent values is approximated by EP on the truncated tilted
Gaussian; with no unstable points and no threshold the model is plain GP
regression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .ep import (
    EPConfig,
    EPResult,
    SiteDirection,
    TiltedBase,
    ep_box_posterior,
    stable_noise_variance,
    tilted_base,
)
from .kernels import KernelSpec, NoiseSpec, kernel_matrix, points
from .truncnorm import norm_cdf, norm_log_cdf

# sentinel threshold meaning "no truncation" (plain GP regression)
NO_THRESHOLD = math.inf
# stable/unstable pairs closer than this (in lengthscale units) get inflated noise
COINCIDENCE_RADIUS = 1e-3
COINCIDENCE_NOISE_FACTOR = 10.0
GRID_POINTS = 50
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class HybridDataset:
    """Stable (x, y) pairs followed by unstable x-only labels."""

    stable_x: np.ndarray
    stable_y: np.ndarray
    unstable_x: np.ndarray

    def __post_init__(self):
        sx = np.asarray(self.stable_x, dtype=float)
        ux = np.asarray(self.unstable_x, dtype=float)
        sy = np.asarray(self.stable_y, dtype=float).reshape(-1)
        dim = sx.shape[-1] if sx.ndim == 2 and sx.size else (ux.shape[-1] if ux.ndim == 2 and ux.size else None)
        if dim is None:
            dim = sx.shape[-1] if sx.ndim == 2 else (ux.shape[-1] if ux.ndim == 2 else 1)
        sx = sx.reshape(-1, dim)
        ux = ux.reshape(-1, dim)
        if sx.shape[0] != sy.shape[0]:
            raise ValueError(f"{sx.shape[0]} stable inputs but {sy.shape[0]} observations")
        object.__setattr__(self, "stable_x", sx)
        object.__setattr__(self, "stable_y", sy)
        object.__setattr__(self, "unstable_x", ux)

    @classmethod
    def empty(cls, dim: int) -> "HybridDataset":
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros((0, dim)))

    @property
    def dim(self) -> int:
        return self.stable_x.shape[1]

    @property
    def n_stable(self) -> int:
        return self.stable_x.shape[0]

    @property
    def n_unstable(self) -> int:
        return self.unstable_x.shape[0]

    def __len__(self) -> int:
        return self.n_stable + self.n_unstable

    @property
    def inputs(self) -> np.ndarray:
        """All inputs, stable first."""
        return np.vstack([self.stable_x, self.unstable_x])

    def add_stable(self, x, y: float) -> "HybridDataset":
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        return HybridDataset(np.vstack([self.stable_x, x]), np.append(self.stable_y, float(y)), self.unstable_x)

    def add_unstable(self, x) -> "HybridDataset":
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        return HybridDataset(self.stable_x, self.stable_y, np.vstack([self.unstable_x, x]))

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "stable": [{"x": x.tolist(), "y": float(y)} for x, y in zip(self.stable_x, self.stable_y)],
            "unstable": [{"x": x.tolist()} for x in self.unstable_x],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HybridDataset":
        dim = int(obj["dim"])
        stable = obj.get("stable", [])
        unstable = obj.get("unstable", [])
        for entry in stable + unstable:
            if len(entry["x"]) != dim:
                raise ValueError(f"point {entry['x']} does not have dimension {dim}")
        return cls(
            points([e["x"] for e in stable], dim),
            np.array([float(e["y"]) for e in stable]),
            points([e["x"] for e in unstable], dim),
        )


@dataclass(frozen=True)
class ThresholdPrior:
    mean: float
    std_dev: float

    def __post_init__(self):
        if not self.std_dev > 0:
            raise ValueError(f"threshold prior std_dev must be positive, got {self.std_dev}")


@dataclass(frozen=True)
class PredictiveMoments:
    mean: np.ndarray
    variance: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


@dataclass(frozen=True)
class GPCRModel:
    kernel: KernelSpec
    noise: NoiseSpec
    data: HybridDataset
    threshold_estimate: float
    ep: EPResult
    base: TiltedBase
    ep_config: EPConfig = field(default_factory=EPConfig)
    noise_scale: np.ndarray | None = field(default=None, repr=False)
    # Cholesky of B = I + P^1/2 K P^1/2, where P/eta are the total Gaussian
    # site precision/shift relative to the prior (noise terms plus EP sites)
    _chol: np.ndarray = field(default=None, repr=False)
    _sqrt_prec: np.ndarray = field(default=None, repr=False)
    _alpha: np.ndarray = field(default=None, repr=False)

    @property
    def inputs(self) -> np.ndarray:
        return self.data.inputs

    @property
    def converged(self) -> bool:
        return self.ep.converged

    def features(self, X) -> np.ndarray:
        """Whitened cross-covariance W with posterior cov k(a,b) - W_a^T W_b."""
        Kxf = kernel_matrix(self.kernel, self.inputs, X)
        return linalg.solve_triangular(self._chol, self._sqrt_prec[:, None] * Kxf, lower=True, check_finite=False)

    def posterior_cov(self, X1, X2=None) -> np.ndarray:
        """Posterior covariance of the approximate GP between two point sets."""
        if X2 is None:
            K = kernel_matrix(self.kernel, X1)
            if len(self.data) == 0:
                return K
            W = self.features(X1)
            return K - W.T @ W
        K = kernel_matrix(self.kernel, X1, X2)
        if len(self.data) == 0:
            return K
        return K - self.features(X1).T @ self.features(X2)

    def predict(self, X_test) -> PredictiveMoments:
        return predict(self, X_test)

    def prob_stable(self, X) -> np.ndarray:
        return prob_stable(self, X)


def _coincidence_scale(data: HybridDataset, kernel: KernelSpec) -> np.ndarray | None:
    if data.n_stable == 0 or data.n_unstable == 0:
        return None
    ls = np.asarray(kernel.lengthscales)
    d = np.linalg.norm(data.stable_x[:, None, :] / ls - data.unstable_x[None, :, :] / ls, axis=-1)
    close = np.any(d < COINCIDENCE_RADIUS, axis=1)
    if not np.any(close):
        return None
    return np.where(close, COINCIDENCE_NOISE_FACTOR, 1.0)


def _effective_noise(noise: NoiseSpec, kernel: KernelSpec) -> NoiseSpec:
    # a strictly positive floor keeps the stable-site precision finite
    return NoiseSpec(max(noise.std_dev, 1e-6 * math.sqrt(kernel.variance)))


def _directions(data: HybridDataset) -> list[SiteDirection]:
    return [SiteDirection.STABLE] * data.n_stable + [SiteDirection.UNSTABLE] * data.n_unstable


def prepare_base(data: HybridDataset, kernel: KernelSpec, noise: NoiseSpec):
    """Prior matrix, tilted base, site directions and noise scaling for ``data``."""
    if data.dim != kernel.dim:
        raise ValueError(f"dataset dimension {data.dim} does not match kernel dimension {kernel.dim}")
    noise = _effective_noise(noise, kernel)
    scale = _coincidence_scale(data, kernel)
    K = kernel_matrix(kernel, data.inputs) if len(data) else np.zeros((0, 0))
    base = tilted_base(K, data.stable_y, noise, data.n_stable, scale)
    return K, base, _directions(data), scale


def fit(
    data: HybridDataset,
    kernel: KernelSpec,
    noise: NoiseSpec,
    threshold: float = NO_THRESHOLD,
    ep_config: EPConfig | None = None,
    init_sites=None,
) -> GPCRModel:
    """Fit the EP posterior at a fixed threshold.

    ``threshold=NO_THRESHOLD`` is only valid without unstable points and skips
    EP entirely, giving exact GP regression.
    """
    ep_config = ep_config or EPConfig()
    K, base, directions, scale = prepare_base(data, kernel, noise)
    if math.isinf(threshold) and threshold > 0:
        if data.n_unstable:
            raise ValueError("an unstable point needs a finite threshold")
        ep = EPResult(base.mean, base.covariance, base.log_norm, True, 0, np.zeros(len(data)), np.zeros(len(data)))
    elif not math.isfinite(threshold):
        raise ValueError(f"invalid threshold {threshold}")
    else:
        ep = ep_box_posterior(base, directions, threshold, ep_config, init_sites)
    return _assemble(kernel, noise, data, threshold, ep, base, ep_config, scale, K)


def _assemble(kernel, noise, data, threshold, ep, base, ep_config, scale, K) -> GPCRModel:
    n = len(data)
    eff = _effective_noise(noise, kernel)
    prec = np.zeros(n)
    shift = np.zeros(n)
    if data.n_stable:
        var = stable_noise_variance(eff, data.n_stable, scale)
        prec[: data.n_stable] = 1.0 / var
        shift[: data.n_stable] = data.stable_y / var
    prec = prec + ep.site_precision
    shift = shift + ep.site_shift
    sq = np.sqrt(prec)
    if n:
        B = np.eye(n) + sq[:, None] * K * sq[None, :]
        L = linalg.cholesky(B, lower=True, check_finite=False)
        # alpha = K^-1 mu_EP = eta - P^1/2 B^-1 P^1/2 K eta
        t = linalg.cho_solve((L, True), sq * (K @ shift), check_finite=False)
        alpha = shift - sq * t
    else:
        L = np.zeros((0, 0))
        alpha = np.zeros(0)
    return GPCRModel(kernel, noise, data, float(threshold), ep, base, ep_config, scale, L, sq, alpha)


def predict(model: GPCRModel, X_test) -> PredictiveMoments:
    """Predictive mean and variance of the latent function.

    Equivalent to mu = K_*f K^-1 mu_EP and
    var = K_** - K_*f K^-1 K_f* + K_*f K^-1 Sigma_EP K^-1 K_f*,
    evaluated through the Gaussian-site form so K is never inverted.
    """
    X = points(np.atleast_1d(X_test) if np.ndim(X_test) < 2 else X_test, model.kernel.dim)
    prior_var = np.full(X.shape[0], model.kernel.variance)
    if len(model.data) == 0:
        return PredictiveMoments(np.zeros(X.shape[0]), prior_var)
    Kxf = kernel_matrix(model.kernel, model.inputs, X)
    mean = Kxf.T @ model._alpha
    W = linalg.solve_triangular(model._chol, model._sqrt_prec[:, None] * Kxf, lower=True, check_finite=False)
    var = np.clip(prior_var - np.sum(W * W, axis=0), 0.0, model.kernel.variance)
    return PredictiveMoments(mean, var)


def prob_stable(model: GPCRModel, X) -> np.ndarray:
    """P(f(x) <= c_hat) under the Gaussian predictive."""
    if math.isinf(model.threshold_estimate):
        X = points(np.atleast_1d(X) if np.ndim(X) < 2 else X, model.kernel.dim)
        return np.ones(X.shape[0]) if model.threshold_estimate > 0 else np.zeros(X.shape[0])
    pred = predict(model, X)
    return _prob_below(model.threshold_estimate, pred.mean, pred.std)


def log_prob_stable(model: GPCRModel, X) -> np.ndarray:
    """log P(f(x) <= c_hat); finite deep in the unstable tail where the probability underflows."""
    if math.isinf(model.threshold_estimate):
        X = points(np.atleast_1d(X) if np.ndim(X) < 2 else X, model.kernel.dim)
        return np.zeros(X.shape[0]) if model.threshold_estimate > 0 else np.full(X.shape[0], -np.inf)
    pred = predict(model, X)
    gap = model.threshold_estimate - pred.mean
    out = np.where(gap >= 0, 0.0, -np.inf)
    pos = pred.std > 0
    out[pos] = norm_log_cdf(gap[pos] / pred.std[pos])
    return out


def _prob_below(c, mean, std):
    gap = c - mean
    out = np.where(gap >= 0, 1.0, 0.0)
    pos = std > 0
    out[pos] = norm_cdf(gap[pos] / std[pos])
    return out


# -- threshold estimation ---------------------------------------------------


def _grid_then_golden(fn: Callable[[float], float], lo: float, hi: float, n_grid: int = GRID_POINTS, rel_tol: float = 1e-4) -> float:
    grid = np.linspace(lo, hi, n_grid)
    values = np.array([fn(c) for c in grid])
    values = np.where(np.isfinite(values), values, -np.inf)
    i = int(np.argmax(values))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, n_grid - 1)]
    best_c, best_v = grid[i], values[i]
    # refine to a tolerance on the scale of the estimate, not of the (possibly huge) window
    tol = max(min(rel_tol * (hi - lo), rel_tol * (1.0 + abs(best_c))), 1e-12)
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = fn(x1), fn(x2)
    while b - a > tol:
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = fn(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = fn(x2)
    for c, v in ((x1, f1), (x2, f2)):
        if v > best_v:
            best_c, best_v = c, v
    return float(best_c)


class _LogMass:
    """log F(c) on a fixed dataset, warm-starting EP from the previous solve."""

    def __init__(self, data, kernel, noise, ep_config):
        _, self.base, self.directions, _ = prepare_base(data, kernel, noise)
        self.config = ep_config or EPConfig()
        self.sites = None
        self.calls = 0

    def __call__(self, c: float) -> float:
        self.calls += 1
        res = ep_box_posterior(self.base, self.directions, c, self.config, self.sites)
        if res.converged and np.all(np.isfinite(res.site_precision)):
            self.sites = (res.site_precision, res.site_shift)
        return res.log_mass


def estimate_threshold_ml(data: HybridDataset, kernel: KernelSpec, noise: NoiseSpec, search_bounds, ep_config=None) -> float:
    """Maximum-likelihood threshold: argmax_c log F(c) on ``search_bounds``.

    Returns 0 without stable data and the upper bound without unstable data
    (the likelihood then keeps increasing with c).
    """
    lo, hi = map(float, search_bounds)
    if not lo < hi:
        raise ValueError(f"empty search interval {search_bounds}")
    if len(data) == 0:
        raise ValueError("threshold estimation needs at least one data point")
    if data.n_stable == 0:
        return 0.0
    if data.n_unstable == 0:
        return hi
    lo = max(lo, float(np.max(data.stable_y)))
    if lo >= hi:
        return lo
    return _grid_then_golden(_LogMass(data, kernel, noise, ep_config), lo, hi)


def estimate_threshold_map(data: HybridDataset, kernel: KernelSpec, noise: NoiseSpec, prior: ThresholdPrior, ep_config=None) -> float:
    """MAP threshold under a Gaussian hyperprior.

    Searches [mean - 3 sd, mean + 3 sd] clipped below at max(stable_y). If the
    stable data already exceed the prior window, the window is moved to
    [max(stable_y), max(stable_y) + 3 sd].
    """
    if len(data) == 0:
        raise ValueError("threshold estimation needs at least one data point")
    if data.n_stable == 0:
        return 0.0
    lo = prior.mean - 3.0 * prior.std_dev
    hi = prior.mean + 3.0 * prior.std_dev
    lo = max(lo, float(np.max(data.stable_y)))
    hi = max(hi, lo + 3.0 * prior.std_dev) if lo >= hi else hi
    log_mass = _LogMass(data, kernel, noise, ep_config)
    return _grid_then_golden(lambda c: log_mass(c) - 0.5 * (c - prior.mean) ** 2 / prior.std_dev**2, lo, hi)


# -- exact predictive diagnostic -------------------------------------------


def exact_predictive_density(model: GPCRModel, x_star, f_grid) -> np.ndarray:
    """Non-Gaussian predictive density of f(x_star) on ``f_grid``, scaled to unit max.

    Each grid value f_* costs one EP solve: the density is
    N(f_* | m_*, s_**) * F(c, f_*), where F is the truncated mass of the
    training latents conditioned on f_*. Meant for diagnostics and plots only.
    """
    data = model.data
    f_grid = np.asarray(f_grid, dtype=float)
    x_star = np.asarray(x_star, dtype=float).reshape(1, data.dim)
    X = np.vstack([data.inputs, x_star])
    K = kernel_matrix(model.kernel, X)
    noise = _effective_noise(model.noise, model.kernel)
    joint = tilted_base(K, data.stable_y, noise, data.n_stable, model.noise_scale)
    m_f, m_s = joint.mean[:-1], joint.mean[-1]
    s_ff = joint.covariance[:-1, :-1]
    s_fs = joint.covariance[:-1, -1]
    s_ss = joint.covariance[-1, -1]
    B = s_ff - np.outer(s_fs, s_fs) / s_ss
    B = 0.5 * (B + B.T)
    gain = s_fs / s_ss
    directions = _directions(data)
    c = model.threshold_estimate
    log_dens = np.empty_like(f_grid)
    sites = None
    for k, fs in enumerate(f_grid):
        log_gauss = -0.5 * (fs - m_s) ** 2 / s_ss
        if not directions or math.isinf(c):
            log_dens[k] = log_gauss
            continue
        cond = TiltedBase(m_f + gain * (fs - m_s), B, 0.0)
        res = ep_box_posterior(cond, directions, c, model.ep_config, sites)
        if res.converged:
            sites = (res.site_precision, res.site_shift)
        log_dens[k] = log_gauss + res.log_mass
    log_dens -= np.max(log_dens)
    return np.exp(log_dens)
