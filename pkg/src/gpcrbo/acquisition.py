"""Min-value entropy search with probabilistic constraints.

Min-value samples come from local searches on "virtual" function draws: each
query samples the current predictive, conditioned on the previous queries of
the same search, so a search explores one consistent random function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.stats import qmc

from .gpcr import GPCRModel, predict
from .kernels import FactorizationError, NoiseSpec, kernel_matrix
from ._virtual import virtual_moments
from .truncnorm import inverse_mills, norm_log_cdf

SCHUR_JITTER = 1e-8
VIRTUAL_NOISE_INFLATION = 10.0
# floor on the predictive std inside the acquisition surface
MIN_STD = 1e-10


@dataclass(frozen=True)
class AcquisitionConfig:
    n_samples: int = 10
    delta: float = 0.05
    max_virtual_evals: int = 200
    restart_tolerance: float = 1e-3
    n_restarts: int = 5
    candidate_grid: int = 2000
    refine_steps: int = 50
    shrink: float = 0.5
    # first step of the compass search inside min-value sampling
    sampler_step: float = 0.1
    # lowest stable observations scored by every min-value sample
    n_incumbents: int = 5
    # compass searches per min-value sample, all on the same virtual function
    sampler_restarts: int = 5

    def __post_init__(self):
        if self.n_samples < 1 or self.max_virtual_evals < 1 or self.candidate_grid < 1 or self.sampler_restarts < 1:
            raise ValueError("sample, evaluation and grid counts must be positive")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.restart_tolerance > 0 or not 0 < self.shrink < 1:
            raise ValueError("restart_tolerance must be positive and shrink in (0, 1)")
        if self.n_restarts < 0 or self.refine_steps < 0 or self.n_incumbents < 0:
            raise ValueError("n_restarts, refine_steps and n_incumbents must be non-negative")


@dataclass(frozen=True)
class MinValueSamples:
    values: np.ndarray
    # True where the search never found a feasible point and the lowest sampled value was used
    fallback: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise ValueError("min-value samples must be a non-empty set of finite values")
        fb = np.zeros(v.size, dtype=bool) if self.fallback is None else np.asarray(self.fallback, dtype=bool)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "fallback", fb)

    def __len__(self) -> int:
        return self.values.size


def woodbury_extend(inv: np.ndarray, cross, diag: float) -> np.ndarray:
    """Inverse of [[A, b], [b^T, d]] from inv = A^-1 in O(n^2).

    A Schur complement that is not clearly positive gets a relative jitter of
    1e-8 * |d|; if it is still non-positive a FactorizationError is raised.
    """
    inv = np.asarray(inv, dtype=float)
    b = np.asarray(cross, dtype=float).reshape(-1)
    n = inv.shape[0]
    if b.shape[0] != n:
        raise ValueError(f"cross vector of length {b.shape[0]} for a {n}x{n} inverse")
    u = inv @ b
    s = float(diag) - float(b @ u)
    if s <= SCHUR_JITTER * abs(diag):
        s += SCHUR_JITTER * max(abs(float(diag)), 1e-300)
    if not s > 0:
        raise FactorizationError(f"non-positive Schur complement {s:g} after jitter")
    out = np.empty((n + 1, n + 1))
    out[:n, :n] = inv + np.outer(u, u) / s
    out[:n, n] = -u / s
    out[n, :n] = -u / s
    out[n, n] = 1.0 / s
    return out


class VirtualDataset:
    """Scratch observations layered on a fitted model.

    The layered process is the model's approximate posterior GP, with
    covariance k_q(a, b) = k(a, b) - W_a^T W_b. Virtual points are ordinary
    noisy observations of it. Their covariance C = k_q(Xv, Xv) + noise is
    tracked through a Cholesky factor that gains one row per point (O(r^2)),
    which stays accurate when the signal-to-noise ratio is large; ``inverse``
    exposes C^-1 for inspection.
    """

    def __init__(self, model: GPCRModel, noise: NoiseSpec | None = None):
        self.model = model
        self.noise = noise if noise is not None else model.noise
        self.dim = model.kernel.dim
        self._ls = np.asarray(model.kernel.lengthscales, dtype=float)
        n_base = len(model.data)
        if n_base:
            self._Ab = np.ascontiguousarray(model.inputs / self._ls)
            self._chol = np.ascontiguousarray(model._chol)
            self._sq = np.ascontiguousarray(model._sqrt_prec, dtype=float)
            self._alpha = np.ascontiguousarray(model._alpha, dtype=float)
        else:
            self._Ab = np.zeros((0, self.dim))
            self._chol = np.zeros((0, 0))
            self._sq = self._alpha = np.zeros(0)
        self.reset()

    def reset(self):
        self._r = 0
        self._alloc(16)

    def _alloc(self, cap: int):
        r = self._r
        old = getattr(self, "_L", None)
        L = np.zeros((cap, cap))
        W = np.zeros((cap, self._Ab.shape[0]))
        A = np.zeros((cap, self.dim))
        z, y, nv = np.zeros(cap), np.zeros(cap), np.zeros(cap)
        if old is not None and r:
            L[:r, :r] = self._L[:r, :r]
            W[:r] = self._W[:r]
            A[:r] = self._A[:r]
            z[:r], y[:r], nv[:r] = self._z[:r], self._y[:r], self._nv[:r]
        # L: Cholesky factor of the virtual covariance, W: base features per
        # virtual point, z = L^-1 (y - base mean), A: inputs over lengthscales
        self._L, self._W, self._A, self._z, self._y, self._nv = L, W, A, z, y, nv

    def __len__(self) -> int:
        return self._r

    @property
    def X(self) -> np.ndarray:
        return self._A[: self._r] * self._ls

    @property
    def y(self) -> np.ndarray:
        return self._y[: self._r].copy()

    @property
    def noise_var(self) -> np.ndarray:
        return self._nv[: self._r].copy()

    def _step(self, x):
        a = np.asarray(x, dtype=float).reshape(self.dim) / self._ls
        return a, virtual_moments(
            self._Ab, self._chol, self._sq, self._alpha, self._A, self._L, self._W, self._z, self._r, a, self.model.kernel.variance
        )

    def moments(self, x) -> tuple[float, float]:
        """Predictive mean and variance of the latent value at one point."""
        _, (_, _, _, _, mean, var) = self._step(x)
        return mean, max(var, 0.0)

    def inverse(self) -> np.ndarray:
        r = self._r
        return linalg.cho_solve((self._L[:r, :r], True), np.eye(r), check_finite=False)

    def covariance(self) -> np.ndarray:
        """Dense C = k_q(Xv, Xv) + noise, recomputed from scratch."""
        return self.model.posterior_cov(self.X) + np.diag(self.noise_var)

    def evaluate(self, x, rng: np.random.Generator) -> float:
        a, (w, l, _, base_var, mean, var) = self._step(x)
        noise_var = self.noise.variance
        d2 = var + noise_var
        if not d2 > SCHUR_JITTER * (base_var + noise_var):
            noise_var *= VIRTUAL_NOISE_INFLATION**2
            d2 = var + noise_var
            if not d2 > SCHUR_JITTER * (base_var + noise_var):
                raise FactorizationError(f"degenerate virtual covariance (Schur complement {d2:g})")
        y = mean + math.sqrt(max(var, 0.0) + noise_var) * float(rng.standard_normal())
        r = self._r
        if r == self._L.shape[0]:
            self._alloc(2 * r)
        d = math.sqrt(d2)
        self._L[r, :r] = l
        self._L[r, r] = d
        self._z[r] = (y - mean) / d
        self._W[r] = w
        self._A[r] = a
        self._y[r] = y
        self._nv[r] = noise_var
        self._r = r + 1
        return y

    def model_draw(self, rng: np.random.Generator) -> float:
        """One draw from the base predictive at a uniform point, not recorded."""
        pred = predict(self.model, rng.random((1, self.dim)))
        return float(pred.mean[0] + pred.std[0] * rng.standard_normal())


def virtual_evaluate(vd: VirtualDataset, x, rng: np.random.Generator) -> float:
    return vd.evaluate(x, rng)


def _merit(values: Sequence[float], bounds: Sequence[float]) -> tuple[float, float]:
    """(constraint violation, objective) for a probe; values[0] is the objective."""
    violation = sum(max(v - b, 0.0) for v, b in zip(values, bounds) if math.isfinite(b))
    return violation, values[0]


def _better(a, b) -> bool:
    if a[0] < b[0]:
        return True
    return a[0] == 0.0 and b[0] == 0.0 and a[1] < b[1]


def incumbent_points(objective: GPCRModel, k: int, constraints: Sequence[GPCRModel] = ()) -> np.ndarray:
    """Inputs of the k lowest stable objective observations, preferring
    those whose constraint posterior means lie at or below the thresholds."""
    data = objective.data
    if data.n_stable == 0:
        return data.stable_x
    feasible = np.ones(data.n_stable, dtype=bool)
    for m in constraints:
        feasible &= predict(m, data.stable_x).mean <= m.threshold_estimate
    # infeasible observations rank after every feasible one
    order = np.lexsort((data.stable_y, ~feasible))[:k]
    return data.stable_x[order]


def _compass_search(probe, x, cfg: AcquisitionConfig):
    """Projected compass search on the merit returned by ``probe``.

    Stops once the step falls below ``cfg.restart_tolerance`` or after
    ``cfg.max_virtual_evals`` probes. A FactorizationError from a probe ends
    the search at the current point.
    """
    try:
        cur = probe(x)
    except FactorizationError:
        return x, None
    evals = 1
    step = cfg.sampler_step
    dim = x.shape[0]
    while evals < cfg.max_virtual_evals and step >= cfg.restart_tolerance:
        moved = False
        for k in range(dim):
            for sign in (1.0, -1.0):
                cand = x.copy()
                cand[k] = min(max(cand[k] + sign * step, 0.0), 1.0)
                if cand[k] == x[k] or evals >= cfg.max_virtual_evals:
                    continue
                try:
                    m = probe(cand)
                except FactorizationError:
                    return x, cur
                evals += 1
                if _better(m, cur):
                    x, cur, moved = cand, m, True
                    break
            if moved:
                break
        if not moved:
            step *= cfg.shrink
    return x, cur


def sample_constrained_min(
    objective: GPCRModel,
    constraints: Sequence[GPCRModel],
    cfg: AcquisitionConfig,
    rng: np.random.Generator,
    objective_threshold: float | None = None,
    incumbents: np.ndarray | None = None,
) -> MinValueSamples:
    """Draw S samples of the constrained minimum value.

    Each sample explores one virtual function (fresh virtual datasets per
    sample). It first scores the incumbents (default: ``cfg.n_incumbents``
    stable observations, the lowest ones the constraint models deem feasible
    first), then runs ``cfg.sampler_restarts`` projected compass searches
    from uniform starts. A probe is feasible when every virtual constraint
    draw is at or below its model's threshold (and, if given, the virtual
    objective draw at or below ``objective_threshold``). The sample is the
    lowest feasible objective draw, including a final draw at each search's
    end point; without any feasible probe it is the lowest objective draw
    overall (flagged as fallback).
    """
    dim = objective.kernel.dim
    bounds = [math.inf if objective_threshold is None else float(objective_threshold)]
    bounds += [m.threshold_estimate for m in constraints]
    if incumbents is None:
        incumbents = incumbent_points(objective, cfg.n_incumbents, constraints)
    incumbents = np.asarray(incumbents, dtype=float).reshape(-1, dim)
    values = np.empty(cfg.n_samples)
    fallback = np.zeros(cfg.n_samples, dtype=bool)
    for i in range(cfg.n_samples):
        vds = [VirtualDataset(objective)] + [VirtualDataset(m) for m in constraints]
        best = math.inf

        def probe(x):
            nonlocal best
            m = _merit([vd.evaluate(x, rng) for vd in vds], bounds)
            if m[0] == 0.0:
                best = min(best, m[1])
            return m

        try:
            for x_inc in incumbents:
                probe(x_inc)
            for _ in range(cfg.sampler_restarts):
                x, cur = _compass_search(probe, rng.random(dim), cfg)
                if cur is not None and cur[0] == 0.0:
                    best = min(best, vds[0].evaluate(x, rng))
        except FactorizationError:
            pass
        if math.isfinite(best):
            values[i] = best
        else:
            # a search cut short before its first draw falls back on a fresh one
            values[i] = float(vds[0].y.min()) if len(vds[0]) else vds[0].model_draw(rng)
            fallback[i] = True
    return MinValueSamples(values, fallback)


def alpha_mes(mu, sigma, samples: MinValueSamples | Sequence[float]) -> np.ndarray:
    """Min-value entropy search: mean over samples of
    -z phi(z) / (2 Phi(-z)) - log Phi(-z), with z = (f_min - mu) / sigma.
    """
    f_min = samples.values if isinstance(samples, MinValueSamples) else np.asarray(samples, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        raise ValueError("sigma must be positive")
    z = (f_min.reshape((1,) * mu.ndim + (-1,)) - mu[..., None]) / sigma[..., None]
    # phi(z) / Phi(-z) = phi(-z) / Phi(-z), the inverse Mills ratio at -z
    r = inverse_mills(-z)
    terms = -0.5 * z * r - norm_log_cdf(-z)
    return np.mean(terms, axis=-1)


def probability_product(constraints: Sequence[GPCRModel], X) -> np.ndarray:
    X = np.atleast_2d(X)
    out = np.ones(X.shape[0])
    for m in constraints:
        out *= m.prob_stable(X)
    return out


def feasible_mode(constraints: Sequence[GPCRModel], grid, delta: float) -> bool:
    """True if some grid point meets the joint confidence 1 - delta (mode (a))."""
    if not constraints:
        return True
    return bool(np.any(probability_product(constraints, grid) >= 1.0 - delta))


def alpha_mesco(X, objective: GPCRModel, constraints: Sequence[GPCRModel], samples, mode_a: bool = True) -> np.ndarray:
    """Constraint-weighted mES at the rows of X.

    Mode (a) multiplies mES by the probability that all constraints hold;
    mode (b), used when no candidate is confidently feasible, keeps only the
    probability product.
    """
    X = np.atleast_2d(X)
    prob = probability_product(constraints, X)
    if constraints and not mode_a:
        return prob
    pred = predict(objective, X)
    return alpha_mes(pred.mean, np.maximum(pred.std, MIN_STD), samples) * prob


def candidate_points(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n scrambled Sobol points in the unit cube."""
    sobol = qmc.Sobol(dim, scramble=True, seed=rng)
    return sobol.random_base2(max(int(math.ceil(math.log2(n))), 0))[:n]


def maximize_acquisition(
    surface: Callable[[np.ndarray], np.ndarray],
    dim: int,
    cfg: AcquisitionConfig,
    rng: np.random.Generator | None = None,
    grid: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Grid search plus compass refinement of the best few candidates.

    ``surface`` maps an (n, dim) array to n values. Ties on the grid go to
    the lowest index and refinement only accepts strict improvements, so a
    flat surface returns the first grid point.
    """
    if grid is None:
        grid = candidate_points(dim, cfg.candidate_grid, rng if rng is not None else np.random.default_rng())
    values = np.asarray(surface(grid), dtype=float)
    values = np.where(np.isfinite(values), values, -np.inf)
    order = np.argsort(-values, kind="stable")
    best_x, best_v = grid[order[0]].copy(), float(values[order[0]])
    step0 = float(grid.shape[0]) ** (-1.0 / dim)
    directions = np.vstack([np.eye(dim), -np.eye(dim)])
    for idx in order[: cfg.n_restarts]:
        x, v = grid[idx].copy(), float(values[idx])
        step = step0
        for _ in range(cfg.refine_steps):
            probes = np.clip(x + step * directions, 0.0, 1.0)
            pv = np.asarray(surface(probes), dtype=float)
            pv = np.where(np.isfinite(pv), pv, -np.inf)
            j = int(np.argmax(pv))
            if pv[j] > v:
                x, v = probes[j], float(pv[j])
            else:
                step *= cfg.shrink
        if v > best_v:
            best_x, best_v = x, v
    return best_x, best_v
