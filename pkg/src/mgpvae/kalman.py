"""Kalman filtering and RTS smoothing over Gaussian sites.

Each latent channel is an independent linear-Gaussian state-space model; the
encoder supplies per-step pseudo-observations ``y_tilde`` with variances
``v_tilde``.  Filtering accumulates the log partition function (the log
marginal likelihood of the sites), smoothing yields the marginal posteriors
``q(s_t)``.

All routines accept optional leading batch dimensions on the sites (many
sequences sharing one time grid) and are written against
:mod:`mgpvae.nn.autodiff`, so they are differentiable when the sites or the
kernel hyperparameters are tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericalError
from .matcore import JITTER_LADDER
from .nn import autodiff as ad
from .ssk import KernelStateSpace, transitions

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianSites:
    """Pseudo-observations ``N(y_tilde | H s_t, v_tilde)`` per step and channel.

    ``y_tilde`` and ``v_tilde`` have shape (..., T, L).  ``mask`` (..., T) marks
    steps that carry a site; unmasked steps are skipped by the update.
    """

    times: np.ndarray
    y_tilde: object
    v_tilde: object
    mask: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or len(times) == 0:
            raise DimensionError("times must be a non-empty 1-D array")
        if np.any(np.diff(times) <= 0):
            raise ValueError("site times must be strictly increasing")
        for name in ("y_tilde", "v_tilde"):
            if not ad.is_tensor(getattr(self, name)):
                object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        y, v = ad.value(self.y_tilde), ad.value(self.v_tilde)
        if np.shape(y) != np.shape(v) or np.ndim(y) < 2 or np.shape(y)[-2] != len(times):
            raise DimensionError(f"site shapes {np.shape(y)} / {np.shape(v)} do not match T={len(times)}")
        if not np.all(v > 0):
            raise ValueError("site variances must be positive")
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape[-1] != len(times):
                raise DimensionError("mask length must match the number of times")
            object.__setattr__(self, "mask", mask)

    @property
    def T(self) -> int:
        return len(self.times)

    @property
    def num_channels(self) -> int:
        return np.shape(ad.value(self.y_tilde))[-1]

    def channel(self, l: int):
        return self.y_tilde[..., l:l + 1], self.v_tilde[..., l:l + 1]


# --- transition models --------------------------------------------------------

class DenseTransitions:
    """Per-step (A_i, Q_i); step 0 goes from the stationary prior to t_0."""

    def __init__(self, A, Q):
        self.A = A
        self.Q = Q

    def __len__(self):
        return np.shape(ad.value(self.A))[0]

    def step(self, i):
        return self.A[i], self.Q[i]

    def left(self, i, X, cache):
        return cache[0] @ X

    def predict(self, i, m, P):
        A, Q = self.step(i)
        cache = (A,)
        return A @ m, A @ P @ ad.mT(A) + Q, cache


class KronTransitions:
    """Transitions ``I_N (x) A_i`` applied block-wise to stacked states."""

    def __init__(self, A, Q, n_blocks: int):
        self.A = A
        self.Q = Q
        self.n = n_blocks
        self.d = np.shape(ad.value(A))[-1]

    def __len__(self):
        return np.shape(ad.value(self.A))[0]

    def _left(self, A, X):
        shp = np.shape(ad.value(X))
        X4 = ad.reshape(X, shp[:-2] + (self.n, self.d, shp[-1]))
        return ad.reshape(A @ X4, shp)

    def _right_T(self, A, X):
        shp = np.shape(ad.value(X))
        X4 = ad.reshape(X, shp[:-1] + (self.n, self.d))
        return ad.reshape(X4 @ ad.mT(A), shp)

    def _q_full(self, Q):
        eye = np.eye(self.n)[:, None, :, None]
        Q4 = ad.reshape(Q, (1, self.d, 1, self.d))
        return ad.reshape(ad.mul(eye, Q4), (self.n * self.d, self.n * self.d))

    def left(self, i, X, cache):
        return self._left(cache[0], X)

    def predict(self, i, m, P):
        A, Q = self.A[i], self.Q[i]
        mp = self._left(A, m)
        Pp = self._right_T(A, self._left(A, P)) + self._q_full(Q)
        return mp, Pp, (A,)


def channel_transitions(ss: KernelStateSpace, times) -> DenseTransitions:
    dts = np.diff(np.asarray(times, dtype=np.float64), prepend=times[0])
    A, Q = transitions(ss, dts)
    return DenseTransitions(A, Q)


# --- core recursions ---------------------------------------------------------------

@dataclass
class ChannelFilter:
    """Per-step filter quantities for one channel (lists of length T)."""

    trans: object
    E: object
    m_pred: list
    P_pred: list
    m_filt: list
    P_filt: list
    caches: list
    log_partition: object  # shape (...,)


def filter_core(trans, E, m0, P0, y, v, mask=None) -> ChannelFilter:
    """Kalman filter with Joseph-form updates.

    ``y``/``v`` have shape (..., T, p); ``E`` is the (p, D) emission.
    Steps with ``mask == False`` skip the update and contribute nothing to the
    log partition.
    """
    T = np.shape(ad.value(y))[-2]
    p = np.shape(ad.value(E))[0]
    D = np.shape(ad.value(E))[1]
    mask_f = None if mask is None else np.asarray(mask, dtype=np.float64)
    eye = np.eye(D)
    batch = np.shape(ad.value(y))[:-2]
    m = ad.broadcast_to(m0, batch + (D, 1))
    P = ad.broadcast_to(P0, batch + (D, D))
    out = ChannelFilter(trans, E, [], [], [], [], [], 0.0)
    Et = ad.mT(E)
    total = 0.0
    for i in range(T):
        mp, Pp, cache = trans.predict(i, m, P)
        yi = y[..., i, :, None]                      # (..., p, 1)
        vi = v[..., i, :]                            # (..., p)
        PEt = Pp @ Et                                # (..., D, p)
        resid = yi - E @ mp                          # (..., p, 1)
        if p == 1:
            lam = E @ PEt + vi[..., None]            # (..., 1, 1)
            W = PEt / lam
            ll = -0.5 * (LOG_2PI + ad.log(lam) + resid * resid / lam)
            ll = ll[..., 0, 0]
        else:
            lam = E @ PEt + _diag_embed(vi)
            chol = ad.cholesky(lam)
            logdet = 2.0 * ad.sum(ad.log(ad.diagonal(chol)), axis=-1)
            W = ad.mT(ad.solve(lam, ad.mT(PEt)))
            quad = ad.sum(resid * ad.solve(lam, resid), axis=(-2, -1))
            ll = -0.5 * (p * LOG_2PI + logdet + quad)
        if mask_f is not None:
            mk = mask_f[..., i]
            W = W * mk[..., None, None]
            ll = ll * mk
        mf = mp + W @ resid
        IWE = eye - W @ E
        if p == 1:
            noise = (W * vi[..., None]) @ ad.mT(W)
        else:
            noise = (W * vi[..., None, :]) @ ad.mT(W)
        Pf = IWE @ Pp @ ad.mT(IWE) + noise
        Pf = 0.5 * (Pf + ad.mT(Pf))
        total = total + ll
        out.m_pred.append(mp)
        out.P_pred.append(Pp)
        out.m_filt.append(mf)
        out.P_filt.append(Pf)
        out.caches.append(cache)
        m, P = mf, Pf
    out.log_partition = total
    return out


def _diag_embed(v):
    p = np.shape(ad.value(v))[-1]
    return ad.mul(v[..., :, None], np.eye(p))


@dataclass
class ChannelSmooth:
    m_smooth: list
    P_smooth: list
    gains: list  # G_i for i = 0..T-2


def smooth_core(cf: ChannelFilter) -> ChannelSmooth:
    """Rauch-Tung-Striebel backward pass."""
    T = len(cf.m_filt)
    ms = [None] * T
    Ps = [None] * T
    gains = [None] * max(T - 1, 0)
    ms[-1], Ps[-1] = cf.m_filt[-1], cf.P_filt[-1]
    for i in range(T - 2, -1, -1):
        APf = cf.trans.left(i + 1, cf.P_filt[i], cf.caches[i + 1])
        G = ad.mT(ad.solve(cf.P_pred[i + 1], APf))
        ms[i] = cf.m_filt[i] + G @ (ms[i + 1] - cf.m_pred[i + 1])
        Pn = cf.P_filt[i] + G @ (Ps[i + 1] - cf.P_pred[i + 1]) @ ad.mT(G)
        Ps[i] = 0.5 * (Pn + ad.mT(Pn))
        gains[i] = G
    return ChannelSmooth(ms, Ps, gains)


# --- public API ---------------------------------------------------------------------

@dataclass
class FilterResult:
    """Filter output per channel.

    ``m_pred``/``m_filt`` are lists (one per channel) of arrays (..., T, d);
    ``P_pred``/``P_filt`` of arrays (..., T, d, d).
    """

    times: np.ndarray
    m_pred: list
    P_pred: list
    m_filt: list
    P_filt: list
    log_partition: object
    channel_log_partition: list
    cores: list = field(repr=False, default_factory=list)


@dataclass
class SmoothedPosterior:
    """Smoothed marginals per channel plus the log partition (E3)."""

    times: np.ndarray
    m_smooth: list
    P_smooth: list
    log_partition: object
    emissions: list
    filter: FilterResult | None = field(repr=False, default=None)
    smooth_cores: list = field(repr=False, default_factory=list)

    @property
    def num_channels(self) -> int:
        return len(self.m_smooth)

    def z_mean(self):
        """Posterior means of Z = H s, shape (..., T, L*p)."""
        cols = [(m[..., None, :] @ ad.mT(H))[..., 0, :] for m, H in zip(self.m_smooth, self.emissions)]
        return ad.concatenate(cols, axis=-1)

    def z_var(self):
        """Posterior marginal variances of Z, shape (..., T, L*p)."""
        cols = []
        for P, H in zip(self.P_smooth, self.emissions):
            HPH = H @ P @ ad.mT(H)
            cols.append(ad.diagonal(HPH))
        return ad.concatenate(cols, axis=-1)


def _stack_means(xs):
    return ad.stack(xs, axis=-3)[..., 0]


def _stack_covs(xs):
    return ad.stack(xs, axis=-3)


def _check_psd(P_filt: list, what: str):
    Ps = np.stack([np.asarray(P) for P in P_filt], axis=-3)
    if not np.all(np.isfinite(Ps)):
        bad = np.argwhere(~np.isfinite(Ps))[0]
        step = int(bad[-3])
        raise NumericalError(f"{what}: non-finite covariance at step {step}", step=step)
    eye = np.eye(Ps.shape[-1])
    for jitter in JITTER_LADDER:
        try:
            np.linalg.cholesky(Ps + jitter * eye)
            return
        except np.linalg.LinAlgError:
            continue
    for i in range(Ps.shape[-3]):
        try:
            np.linalg.cholesky(Ps[..., i, :, :] + JITTER_LADDER[-1] * eye)
        except np.linalg.LinAlgError:
            raise NumericalError(f"{what}: covariance collapsed at step {i}",
                                 jitter=JITTER_LADDER[-1], step=i) from None


def _validate_channels(channels: Sequence[KernelStateSpace], sites: GaussianSites):
    if len(channels) != sites.num_channels:
        raise DimensionError(f"{len(channels)} kernels for {sites.num_channels} site channels")


def filter(channels: Sequence[KernelStateSpace], sites: GaussianSites, check: bool = True) -> FilterResult:  # noqa: A001
    """Run the Kalman filter independently on every channel."""
    _validate_channels(channels, sites)
    cores = []
    for l, ss in enumerate(channels):
        y, v = sites.channel(l)
        trans = channel_transitions(ss, sites.times)
        cf = filter_core(trans, ss.H, ss.m0, ss.Pinf, y, v, sites.mask)
        if check and not ad.is_tensor(cf.P_filt[0]):
            _check_psd(cf.P_filt, f"channel {l}")
            if not np.all(np.isfinite(cf.log_partition)):
                raise NumericalError(f"channel {l}: non-finite log partition")
        cores.append(cf)
    per_channel = [cf.log_partition for cf in cores]
    total = per_channel[0]
    for lp in per_channel[1:]:
        total = total + lp
    return FilterResult(
        times=sites.times,
        m_pred=[_stack_means(cf.m_pred) for cf in cores],
        P_pred=[_stack_covs(cf.P_pred) for cf in cores],
        m_filt=[_stack_means(cf.m_filt) for cf in cores],
        P_filt=[_stack_covs(cf.P_filt) for cf in cores],
        log_partition=total,
        channel_log_partition=per_channel,
        cores=cores,
    )


def smooth(channels: Sequence[KernelStateSpace], sites: GaussianSites, fr: FilterResult) -> SmoothedPosterior:
    """RTS smoothing for every channel of a filter result."""
    _validate_channels(channels, sites)
    if not fr.cores or len(fr.cores) != len(channels):
        raise ValueError("filter result does not match the channels")
    scs = [smooth_core(cf) for cf in fr.cores]
    return SmoothedPosterior(
        times=sites.times,
        m_smooth=[_stack_means(sc.m_smooth) for sc in scs],
        P_smooth=[_stack_covs(sc.P_smooth) for sc in scs],
        log_partition=fr.log_partition,
        emissions=[ss.H for ss in channels],
        filter=fr,
        smooth_cores=scs,
    )


def filter_smooth(channels, sites: GaussianSites, check: bool = True) -> SmoothedPosterior:
    return smooth(channels, sites, filter(channels, sites, check=check))


def merge_times(site_times, query_times):
    """Union of site and query times.

    Returns ``(grid, site_index, query_index)`` where ``grid[site_index]`` are
    the site times and ``grid[query_index]`` the query times (in query order).
    """
    site_times = np.asarray(site_times, dtype=np.float64)
    query_times = np.asarray(query_times, dtype=np.float64).ravel()
    if not np.all(np.isfinite(query_times)):
        raise ValueError("query times must be finite")
    grid = np.union1d(site_times, query_times)
    return grid, np.searchsorted(grid, site_times), np.searchsorted(grid, query_times)


def insert_pseudo_sites(sites: GaussianSites, query_times):
    """Sites on the merged grid with skip-update pseudo-sites at query-only times."""
    grid, s_idx, q_idx = merge_times(sites.times, query_times)
    y, v = ad.value(sites.y_tilde), ad.value(sites.v_tilde)
    batch = np.shape(y)[:-2]
    L = np.shape(y)[-1]
    y_full = np.zeros(batch + (len(grid), L))
    v_full = np.ones(batch + (len(grid), L))
    mask = np.zeros(batch + (len(grid),), dtype=bool)
    y_full[..., s_idx, :] = y
    v_full[..., s_idx, :] = v
    mask[..., s_idx] = True if sites.mask is None else sites.mask
    return GaussianSites(grid, y_full, v_full, mask), q_idx


@dataclass(frozen=True)
class Prediction:
    times: np.ndarray
    mean: np.ndarray  # (..., Q, L)
    var: np.ndarray   # (..., Q, L)


def predict_at(channels: Sequence[KernelStateSpace], sites: GaussianSites, query_times) -> Prediction:
    """Smoothed marginals of Z at arbitrary query times."""
    merged, q_idx = insert_pseudo_sites(sites, query_times)
    post = filter_smooth(channels, merged)
    mean = np.asarray(post.z_mean())[..., q_idx, :]
    var = np.asarray(post.z_var())[..., q_idx, :]
    return Prediction(np.asarray(query_times, dtype=np.float64).ravel(), mean, var)
