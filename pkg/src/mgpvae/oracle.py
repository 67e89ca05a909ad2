"""Dense O(N^3) Gaussian-process regression used as a reference.

These routines are deliberately naive: they build the full kernel matrix and
condition on the data with a Cholesky factorization.  They back the test
suite and the ``oracle-check`` CLI command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .matcore import cholesky, solve_psd
from .ssk import KernelSpec, gram, matern_corr

MAX_DENSE_POINTS = 500


@dataclass(frozen=True)
class DenseGPResult:
    mean: np.ndarray
    cov: np.ndarray
    lml: float
    test_mean: np.ndarray | None = None
    test_cov: np.ndarray | None = None

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov)

    @property
    def test_var(self) -> np.ndarray | None:
        return None if self.test_cov is None else np.diag(self.test_cov)


def gaussian_lml(K: np.ndarray, y: np.ndarray, noise_vars: np.ndarray) -> float:
    chol = cholesky(K + np.diag(noise_vars))
    alpha = solve_psd(chol, y)
    return float(-0.5 * (y @ alpha) - 0.5 * chol.logdet() - 0.5 * len(y) * math.log(2 * math.pi))


def _regress(K, K_star, K_star_star, y, noise_vars) -> DenseGPResult:
    y = np.asarray(y, dtype=np.float64).ravel()
    noise_vars = np.broadcast_to(np.asarray(noise_vars, dtype=np.float64), y.shape)
    if not np.all(noise_vars > 0):
        raise ValueError("noise variances must be positive")
    chol = cholesky(K + np.diag(noise_vars))
    alpha = solve_psd(chol, y)
    V = solve_psd(chol, K)
    mean = K @ alpha
    cov = K - K @ V
    cov = 0.5 * (cov + cov.T)
    lml = float(-0.5 * (y @ alpha) - 0.5 * chol.logdet() - 0.5 * len(y) * math.log(2 * math.pi))
    test_mean = test_cov = None
    if K_star is not None:
        test_mean = K_star @ alpha
        test_cov = K_star_star - K_star @ solve_psd(chol, K_star.T)
        test_cov = 0.5 * (test_cov + test_cov.T)
    return DenseGPResult(mean, cov, lml, test_mean, test_cov)


def dense_regress(spec: KernelSpec, times, y, noise_vars, query_times=None) -> DenseGPResult:
    """Exact GP posterior over ``times`` (and optionally ``query_times``)."""
    times = np.asarray(times, dtype=np.float64).ravel()
    if len(times) > MAX_DENSE_POINTS * 4:
        raise ValueError(f"dense oracle limited to {MAX_DENSE_POINTS * 4} points")
    K = gram(spec, times)
    K_star = K_ss = None
    if query_times is not None:
        K_star = gram(spec, query_times, times)
        K_ss = gram(spec, query_times)
    return _regress(K, K_star, K_ss, y, noise_vars)


@dataclass(frozen=True)
class SpatialKernelSpec:
    """Unit-variance Matern kernel over space with one lengthscale per input dimension."""

    family: str
    lengthscales: tuple

    def __post_init__(self):
        ls = tuple(float(x) for x in np.atleast_1d(self.lengthscales))
        if not all(x > 0 for x in ls):
            raise ValueError("spatial lengthscales must be positive")
        object.__setattr__(self, "lengthscales", ls)


def spatial_gram(spec: SpatialKernelSpec, R1, R2=None, nugget: float = 0.0) -> np.ndarray:
    """Spatial kernel matrix; ``nugget`` is added where two points coincide exactly."""
    R1 = np.atleast_2d(np.asarray(R1, dtype=np.float64))
    R2 = R1 if R2 is None else np.atleast_2d(np.asarray(R2, dtype=np.float64))
    ls = np.asarray(spec.lengthscales)
    diff = (R1[:, None, :] - R2[None, :, :]) / ls
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    K = matern_corr(spec.family, r)
    if nugget:
        K = K + nugget * (r == 0.0)
    return K


def dense_st_regress(spatial: SpatialKernelSpec, temporal: KernelSpec, R, times, y, noise_vars,
                     R_star=None, nugget: float = 0.0) -> DenseGPResult:
    """Exact regression under the separable kernel k_r(r, r') k_t(t, t').

    ``y`` and ``noise_vars`` have shape (N_r, T) (location-major).  Held-out
    predictions at ``R_star`` cover all ``times`` and are returned
    location-major as well.
    """
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    times = np.asarray(times, dtype=np.float64).ravel()
    n = R.shape[0] * len(times)
    if n > MAX_DENSE_POINTS:
        raise ValueError(f"dense spatiotemporal oracle limited to {MAX_DENSE_POINTS} points, got {n}")
    Kt = gram(temporal, times)
    K = np.kron(spatial_gram(spatial, R, nugget=nugget), Kt)
    K_star = K_ss = None
    if R_star is not None:
        R_star = np.atleast_2d(np.asarray(R_star, dtype=np.float64))
        K_star = np.kron(spatial_gram(spatial, R_star, R, nugget=nugget), Kt)
        K_ss = np.kron(spatial_gram(spatial, R_star, nugget=nugget), Kt)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    noise = np.broadcast_to(np.asarray(noise_vars, dtype=np.float64), (R.shape[0], len(times))).reshape(-1)
    return _regress(K, K_star, K_ss, y, noise)


def sample_separable_gp(spatial: SpatialKernelSpec, temporal: KernelSpec, R, times, n_samples: int,
                        rng: np.random.Generator, nugget: float = 0.0) -> np.ndarray:
    """Draws from the separable prior, shape (n_samples, N_r, T)."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    times = np.asarray(times, dtype=np.float64).ravel()
    Lr = cholesky(spatial_gram(spatial, R, nugget=nugget)).lower
    Lt = cholesky(gram(temporal, times)).lower
    eps = rng.standard_normal((n_samples, R.shape[0], len(times)))
    return Lr @ eps @ Lt.T
