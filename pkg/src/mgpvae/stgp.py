"""Separable spatiotemporal Markovian GPs.

With ``k(r, t, r', t') = k_r(r, r') k_t(t, t')`` the latent field at the N_r
training locations is written as ``Z_t = (L_RR kron H) s_t`` where ``s_t``
stacks one temporal state per location, ``L_RR`` is the Cholesky factor of
the spatial kernel matrix, and the transitions are ``I kron A_t``.  Filtering
and smoothing run over time only; space enters through the emission.
Prediction at new locations conditions the spatial GP on Z(R, t).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericalError
from .kalman import (GaussianSites, KronTransitions, SmoothedPosterior, filter_core,
                     insert_pseudo_sites, smooth_core, _stack_covs, _stack_means)
from .matcore import CholFactor, cholesky, solve_psd
from .nn import autodiff as ad
from .oracle import SpatialKernelSpec, spatial_gram
from .ssk import KernelSpec, KernelStateSpace, to_state_space, transitions

SPATIAL_JITTER = 1e-6


@dataclass(frozen=True)
class SpatioTemporalState:
    R: np.ndarray
    spatial: SpatialKernelSpec
    K_RR: np.ndarray            # includes the nugget
    L_RR: np.ndarray
    emission: np.ndarray        # L_RR kron H, shape (N_r, N_r * d)
    channels: tuple             # temporal KernelStateSpace per latent channel
    jitter: float

    @property
    def n_locations(self) -> int:
        return self.R.shape[0]

    @property
    def num_channels(self) -> int:
        return len(self.channels)


def st_build(spatial: SpatialKernelSpec, temporal: KernelSpec | Sequence[KernelSpec], R,
             jitter: float = SPATIAL_JITTER, temporal_state_spaces=None) -> SpatioTemporalState:
    """Assemble the stacked state-space model for locations ``R`` (N_r, D_x).

    ``temporal`` may be one kernel or one per latent channel (the spatial kernel
    is shared).  Pre-built (possibly tensor-valued) temporal state spaces can be
    passed through ``temporal_state_spaces``.
    """
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    if R.shape[0] < 1 or not np.all(np.isfinite(R)):
        raise DimensionError("need at least one finite spatial location")
    if temporal_state_spaces is None:
        specs = [temporal] if isinstance(temporal, KernelSpec) else list(temporal)
        temporal_state_spaces = [to_state_space(s) for s in specs]
    K = spatial_gram(spatial, R, nugget=jitter)
    chol = cholesky(K, jitters=(0.0,))
    # With the nugget on the diagonal every pivot is at least ~jitter; a smaller
    # one means K_RR is singular beyond the jitter (e.g. duplicate locations).
    pivots = np.diag(chol.lower) ** 2
    if jitter > 0 and np.min(pivots) < 0.5 * jitter:
        raise NumericalError(f"spatial Gram matrix singular beyond jitter {jitter:g} "
                             f"(location {int(np.argmin(pivots))} duplicates another)", jitter=jitter)
    H = temporal_state_spaces[0].H
    return SpatioTemporalState(R=R, spatial=spatial, K_RR=K, L_RR=chol.lower,
                               emission=np.kron(chol.lower, H), channels=tuple(temporal_state_spaces),
                               jitter=jitter)


def _channel_sites(sites: GaussianSites, l: int, n: int):
    sl = slice(l * n, (l + 1) * n)
    return sites.y_tilde[..., sl], sites.v_tilde[..., sl]


def st_filter_smooth(st: SpatioTemporalState, sites: GaussianSites, query_times=None) -> SmoothedPosterior:
    """Kalman filter/smoother on the stacked system for each latent channel.

    Sites have shape (..., T, L * N_r), channel-major.  If ``query_times`` is
    given they are merged into the grid as skip-update pseudo-sites.
    """
    n = st.n_locations
    if sites.num_channels != st.num_channels * n:
        raise DimensionError(f"expected {st.num_channels * n} site columns, got {sites.num_channels}")
    if query_times is not None:
        sites, _ = insert_pseudo_sites(sites, query_times)
    dts = np.diff(sites.times, prepend=sites.times[0])
    fcores, scores = [], []
    total = 0.0
    for l, ss in enumerate(st.channels):
        A, Q = transitions(ss, dts)
        trans = KronTransitions(A, Q, n)
        m0 = np.zeros((n * ss.d, 1))
        P0 = ad.reshape(ad.mul(np.eye(n)[:, None, :, None], ad.reshape(ss.Pinf, (1, ss.d, 1, ss.d))),
                        (n * ss.d, n * ss.d))
        y, v = _channel_sites(sites, l, n)
        cf = filter_core(trans, st.emission, m0, P0, y, v, sites.mask)
        fcores.append(cf)
        scores.append(smooth_core(cf))
        total = total + cf.log_partition
    return SmoothedPosterior(
        times=sites.times,
        m_smooth=[_stack_means(sc.m_smooth) for sc in scores],
        P_smooth=[_stack_covs(sc.P_smooth) for sc in scores],
        log_partition=total,
        emissions=[st.emission] * st.num_channels,
        smooth_cores=scores,
    )


@dataclass(frozen=True)
class StPrediction:
    times: np.ndarray
    mean: np.ndarray  # (..., T, L, M)
    cov: np.ndarray   # (..., T, L, M, M)

    @property
    def var(self) -> np.ndarray:
        return np.diagonal(self.cov, axis1=-2, axis2=-1)


def st_projection(st: SpatioTemporalState, r_star):
    """Return (B_space, C_space): B = B_space kron H on the stacked state and
    the spatial part of the conditional covariance (multiply by k_t(0, 0))."""
    r_star = np.atleast_2d(np.asarray(r_star, dtype=np.float64))
    if r_star.shape[1] != st.R.shape[1]:
        raise DimensionError("r_star has the wrong spatial dimension")
    K_sR = spatial_gram(st.spatial, r_star, st.R, nugget=st.jitter)
    K_ss = spatial_gram(st.spatial, r_star, nugget=st.jitter)
    weights = solve_psd(CholFactor(st.L_RR, st.jitter), K_sR.T).T   # K_sR K_RR^{-1}
    B_space = weights @ st.L_RR
    C_space = K_ss - weights @ K_sR.T
    C_space = 0.5 * (C_space + C_space.T)
    return B_space, C_space


def st_predict(st: SpatioTemporalState, post: SmoothedPosterior, r_star, t=None) -> StPrediction:
    """Predictive mean/covariance of Z at locations ``r_star`` and times ``t``.

    ``t`` must be a subset of ``post.times`` (use ``query_times`` in
    :func:`st_filter_smooth` to add arbitrary times); ``None`` means all.
    """
    times = post.times
    if t is None:
        idx = np.arange(len(times))
    else:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        idx = np.searchsorted(times, t)
        if np.any(idx >= len(times)) or not np.allclose(times[np.minimum(idx, len(times) - 1)], t, rtol=0, atol=0):
            raise ValueError("prediction times must be part of the posterior grid")
    B_space, C_space = st_projection(st, r_star)
    means, covs = [], []
    for l, ss in enumerate(st.channels):
        H = np.asarray(ad.value(ss.H))
        B = np.kron(B_space, H)
        m = np.asarray(ad.value(post.m_smooth[l]))[..., idx, :]
        P = np.asarray(ad.value(post.P_smooth[l]))[..., idx, :, :]
        kt0 = float(np.asarray(ad.value(ss.variance)))
        means.append(m @ B.T)
        covs.append(B @ P @ B.T + kt0 * C_space)
    return StPrediction(times[idx], np.stack(means, axis=-2), np.stack(covs, axis=-3))
