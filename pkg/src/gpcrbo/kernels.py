"""Stationary covariance functions and safe Cholesky factorization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

SQRT3 = np.sqrt(3.0)

# absolute jitter ladder, scaled by the mean diagonal of the matrix (see cholesky_with_jitter)
JITTER_START = 1e-10
JITTER_CAP = 1e-4


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a matrix stays indefinite after the maximum jitter."""


@dataclass(frozen=True)
class KernelSpec:
    variance: float
    lengthscales: tuple[float, ...]
    family: str = "matern32"

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", tuple(float(l) for l in np.atleast_1d(self.lengthscales)))
        if not self.variance > 0:
            raise ValueError(f"kernel variance must be positive, got {self.variance}")
        if len(self.lengthscales) == 0 or any(not l > 0 for l in self.lengthscales):
            raise ValueError(f"lengthscales must be positive, got {self.lengthscales}")
        if self.family != "matern32":
            raise ValueError(f"unsupported kernel family {self.family!r}")

    @classmethod
    def isometric(cls, variance: float, lengthscale: float, dim: int) -> "KernelSpec":
        return cls(float(variance), (float(lengthscale),) * dim)

    @property
    def dim(self) -> int:
        return len(self.lengthscales)


@dataclass(frozen=True)
class NoiseSpec:
    std_dev: float

    def __post_init__(self):
        if not self.std_dev >= 0:
            raise ValueError(f"noise std_dev must be non-negative, got {self.std_dev}")

    @property
    def variance(self) -> float:
        return self.std_dev**2


def _as_points(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, dim) if dim > 1 or X.size == 0 else X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"points must have dimension {dim}, got array of shape {X.shape}")
    return X


def matern32(spec: KernelSpec, x, x2) -> float:
    """Matern 3/2 covariance between two single points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != (spec.dim,) or x2.shape != (spec.dim,):
        raise ValueError(f"points must have dimension {spec.dim}, got {x.shape} and {x2.shape}")
    r = SQRT3 * np.sqrt(np.sum(((x - x2) / np.asarray(spec.lengthscales)) ** 2))
    return float(spec.variance * (1.0 + r) * np.exp(-r))


def kernel_matrix(spec: KernelSpec, X, X2=None) -> np.ndarray:
    """Cross-covariance between the rows of X and X2 (X2 defaults to X).

    Identical inputs give exactly ``spec.variance``; the self-covariance is
    symmetrized so callers can rely on bitwise symmetry.
    """
    ls = np.asarray(spec.lengthscales)
    A = _as_points(X, spec.dim) / ls
    symmetric = X2 is None
    B = A if symmetric else _as_points(X2, spec.dim) / ls
    d2 = np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2.0 * A @ B.T
    np.maximum(d2, 0.0, out=d2)
    r = SQRT3 * np.sqrt(d2)
    K = spec.variance * (1.0 + r) * np.exp(-r)
    if symmetric:
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, spec.variance)
    return K


def kernel_diag(spec: KernelSpec, X) -> np.ndarray:
    return np.full(_as_points(X, spec.dim).shape[0], spec.variance)


def cholesky_with_jitter(M: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``M + jitter * I``.

    Jitter starts at 1e-10 and grows by 10x up to 1e-4, both relative to the
    mean diagonal of ``M`` (so a unit-diagonal matrix sees the absolute ladder).
    Returns the factor and the absolute jitter that was applied.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    scale = float(np.mean(np.abs(np.diag(M)))) or 1.0
    jitter = JITTER_START
    while jitter <= JITTER_CAP * (1 + 1e-9):
        try:
            L = linalg.cholesky(M + jitter * scale * np.eye(n), lower=True, check_finite=False)
            return L, jitter * scale
        except linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationError(f"matrix is not positive definite even with jitter {JITTER_CAP * scale:g}")


def chol_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    return linalg.cho_solve((L, True), B, check_finite=False)


def points(X: Sequence, dim: int) -> np.ndarray:
    """Coerce a list of points into an (n, dim) float array."""
    if len(X) == 0:
        return np.zeros((0, dim))
    return _as_points(X, dim)
