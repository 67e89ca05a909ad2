"""Dense-versus-Markovian equivalence checks, reported as maximum relative errors."""

from __future__ import annotations

import numpy as np

from ..kalman import GaussianSites, filter_smooth
from ..matcore import matexp
from ..oracle import SpatialKernelSpec, dense_regress, dense_st_regress
from ..ssk import FAMILIES, KernelSpec, discretize, kernel, to_state_space
from ..stgp import SPATIAL_JITTER, st_build, st_filter_smooth, st_predict

TOLERANCES = {
    "temporal_mean": 1e-6, "temporal_var": 1e-6, "temporal_lml": 1e-6,
    "stationarity": 1e-10, "kernel_consistency": 1e-10,
    "st_mean": 1e-5, "st_var": 1e-5,
}


def rel_err(a, b, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def norm_rel_err(a, b) -> float:
    """max |a - b| / max |b|; stable where entries of ``b`` cross zero."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-300))


def random_irregular_times(rng, T: int) -> np.ndarray:
    return np.cumsum(rng.uniform(0.05, 1.0, T))


def random_spec(rng, family: str) -> KernelSpec:
    return KernelSpec.create(family, float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 3.0)))


def check_temporal(rng, family: str, T: int) -> dict:
    spec = random_spec(rng, family)
    times = random_irregular_times(rng, T)
    y = rng.standard_normal(T)
    v = rng.uniform(0.05, 0.5, T)
    post = filter_smooth([to_state_space(spec)], GaussianSites(times, y[:, None], v[:, None]))
    ref = dense_regress(spec, times, y, v)
    return {
        "temporal_mean": norm_rel_err(np.asarray(post.z_mean())[:, 0], ref.mean),
        "temporal_var": rel_err(np.asarray(post.z_var())[:, 0], ref.var),
        "temporal_lml": rel_err(float(post.log_partition), ref.lml),
    }


def check_stationarity(rng, family: str) -> float:
    ss = to_state_space(random_spec(rng, family))
    dt = float(10 ** rng.uniform(-3, 1.5))
    tr = discretize(ss, dt)
    return float(np.max(np.abs(tr.A @ ss.Pinf @ tr.A.T + tr.Q - ss.Pinf)))


def check_kernel_consistency(rng, family: str) -> float:
    spec = random_spec(rng, family)
    ss = to_state_space(spec)
    tau = float(rng.uniform(0, 4 * spec.lengthscale))
    via_sde = float((ss.H @ matexp(tau * ss.F) @ ss.Pinf @ ss.H.T)[0, 0])
    return rel_err(via_sde, kernel(spec, tau))


def check_spatiotemporal(rng, n_locations: int = 5, T: int = 20) -> dict:
    family = FAMILIES[int(rng.integers(len(FAMILIES)))]
    temporal = random_spec(rng, family)
    spatial = SpatialKernelSpec("matern32", (float(rng.uniform(0.3, 1.0)),) * 2)
    R_all = rng.uniform(0, 1, (n_locations, 2))
    held = int(rng.integers(n_locations))
    R = np.delete(R_all, held, axis=0)
    r_star = R_all[held:held + 1]
    times = random_irregular_times(rng, T)
    Y = rng.standard_normal((len(R), T))
    V = rng.uniform(0.05, 0.5, (len(R), T))
    st = st_build(spatial, temporal, R)
    sites = GaussianSites(times, Y.T, V.T)
    pred = st_predict(st, st_filter_smooth(st, sites), r_star)
    ref = dense_st_regress(spatial, temporal, R, times, Y, V, R_star=r_star, nugget=SPATIAL_JITTER)
    return {
        "st_mean": norm_rel_err(pred.mean[:, 0, 0], ref.test_mean),
        "st_var": rel_err(pred.var[:, 0, 0], ref.test_var),
    }


def run_oracle_check(seed: int = 0, n_grids: int = 20, T_values=(10, 50, 200), n_pairs: int = 100,
                     n_st: int = 10) -> dict:
    """Maximum errors across all checks, keyed like :data:`TOLERANCES`."""
    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in TOLERANCES}
    for family in FAMILIES:
        for T in T_values:
            for _ in range(n_grids):
                for k, v in check_temporal(rng, family, T).items():
                    worst[k] = max(worst[k], v)
    for _ in range(n_pairs):
        family = FAMILIES[int(rng.integers(len(FAMILIES)))]
        worst["stationarity"] = max(worst["stationarity"], check_stationarity(rng, family))
    for family in FAMILIES:
        for _ in range(n_pairs):
            worst["kernel_consistency"] = max(worst["kernel_consistency"], check_kernel_consistency(rng, family))
    for _ in range(n_st):
        for k, v in check_spatiotemporal(rng).items():
            worst[k] = max(worst[k], v)
    return worst
