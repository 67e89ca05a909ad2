"""Variational objective: analytic site expectation, Monte-Carlo reconstruction,
log partition, and the importance-weighted likelihood estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, NumericalError
from .kalman import GaussianSites, SmoothedPosterior
from .matcore import JITTER_LADDER, cholesky
from .nn import autodiff as ad

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ElboBreakdown:
    """Sums over the sequences of a batch; ``elbo = e3 + e2 - e1``.

    Fields are floats, or tensors when computed on a tape.
    """

    e1: object
    e2: object
    e3: object
    elbo: object
    kl: object
    n_sequences: int

    def per_sequence(self) -> "ElboBreakdown":
        n = self.n_sequences
        return ElboBreakdown(self.e1 / n, self.e2 / n, self.e3 / n, self.elbo / n, self.kl / n, 1)

    def as_floats(self) -> dict:
        return {k: float(np.asarray(ad.value(getattr(self, k)))) for k in ("e1", "e2", "e3", "elbo", "kl")}


@dataclass
class LatentSample:
    s: object      # (..., T, sum_l d_l)
    z: object      # (..., T, L)
    noise: object  # (..., T, sum_l d_l)


# --- E1 ------------------------------------------------------------------------------------

def e1_terms(post: SmoothedPosterior, sites: GaussianSites):
    """Per-sequence E1, shape (...,)."""
    zm, zv = post.z_mean(), post.z_var()
    y, v = sites.y_tilde, sites.v_tilde
    if np.shape(ad.value(zm)) != np.shape(ad.value(y)):
        raise DimensionError(f"posterior {np.shape(ad.value(zm))} vs sites {np.shape(ad.value(y))}")
    r = y - zm
    terms = -0.5 * (LOG_2PI + ad.log(v) + (r * r + zv) / v)
    per_step = ad.sum(terms, axis=-1)
    if sites.mask is not None:
        per_step = per_step * sites.mask.astype(np.float64)
    return ad.sum(per_step, axis=-1)


def e1_analytic(post: SmoothedPosterior, sites: GaussianSites):
    """Expected site log-density under the smoothed marginals, summed over everything."""
    return ad.sum(e1_terms(post, sites))


# --- sampling -----------------------------------------------------------------------------

def _pick_jitter(P: np.ndarray) -> float:
    eye = np.eye(P.shape[-1])
    for j in JITTER_LADDER:
        try:
            np.linalg.cholesky(P + j * eye)
            return j
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("smoothed covariance is not positive definite", jitter=JITTER_LADDER[-1])


def _draw_marginals(post: SmoothedPosterior, noise: list):
    """s = m + chol(P) eps per channel; ``noise[l]`` has shape (K, ..., T, d_l)."""
    ss, zs = [], []
    for m, P, E, eps in zip(post.m_smooth, post.P_smooth, post.emissions, noise):
        jit = _pick_jitter(np.asarray(ad.value(P)))
        Pj = P + jit * np.eye(np.shape(ad.value(P))[-1]) if jit else P
        chol = ad.cholesky(Pj)
        s = m + (chol @ eps[..., None])[..., 0]
        z = (s[..., None, :] @ ad.mT(E))[..., 0, :]
        ss.append(s)
        zs.append(z)
    return ss, zs


def draw_noise(post: SmoothedPosterior, K: int, rngs) -> list:
    """Standard-normal draws per channel, shape (K, ..., T, d_l).

    ``rngs`` is one generator, or one per leading batch item (independent
    per-sequence streams).
    """
    out = []
    batch = np.shape(ad.value(post.m_smooth[0]))[:-2]
    for m in post.m_smooth:
        T, d = np.shape(ad.value(m))[-2:]
        if isinstance(rngs, np.random.Generator):
            out.append(rngs.standard_normal((K,) + batch + (T, d)))
        else:
            if len(batch) != 1 or len(rngs) != batch[0]:
                raise DimensionError("need one generator per batch item")
            out.append(np.stack([g.standard_normal((K, T, d)) for g in rngs], axis=1))
    return out


def sample_posterior(post: SmoothedPosterior, K: int, rng, noise: list | None = None) -> list[LatentSample]:
    """K reparameterized draws from the per-step smoothed marginals."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if noise is None:
        noise = draw_noise(post, K, rng)
    ss, zs = _draw_marginals(post, noise)
    s_all = ad.concatenate(ss, axis=-1)
    z_all = ad.concatenate(zs, axis=-1)
    n_all = np.concatenate(noise, axis=-1)
    return [LatentSample(s_all[k], z_all[k], n_all[k]) for k in range(K)]


def _sample_z(post: SmoothedPosterior, K: int, rngs):
    _, zs = _draw_marginals(post, draw_noise(post, K, rngs))
    return ad.concatenate(zs, axis=-1)


# --- ELBO -----------------------------------------------------------------------------------

def child_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent per-item streams derived from one root draw."""
    root = int(rng.integers(2**63 - 1))
    return [np.random.default_rng([root, j]) for j in range(n)]


def group_by_times(batch) -> list[list[int]]:
    groups: dict[bytes, list[int]] = {}
    for i, seq in enumerate(batch):
        key = np.asarray(seq.times, dtype=np.float64).tobytes()
        groups.setdefault(key, []).append(i)
    return list(groups.values())


def _check_nonempty(seq):
    T = len(seq.times)
    mask = getattr(seq, "mask", None)
    if T == 0 or (mask is not None and not np.any(mask)):
        raise ValueError("sequence has no observed steps")


def elbo(model, batch, K: int, rng: np.random.Generator, view=None) -> ElboBreakdown:
    """ELBO summed over ``batch`` (sequences with ``times``, ``y``, ``mask``).

    Sequences sharing a time grid run through one batched filter.  Each
    sequence draws its samples from its own stream.
    """
    from .model import SpatioTemporalMGPVAE

    if K < 1:
        raise ValueError("K must be at least 1")
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    for seq in batch:
        _check_nonempty(seq)
    if view is None:
        view, _ = model.view()
    rngs = child_rngs(rng, len(batch))
    e1 = e2 = e3 = 0.0
    for idx in group_by_times(batch):
        times = np.asarray(batch[idx[0]].times, dtype=np.float64)
        y = np.stack([np.asarray(batch[i].y, dtype=np.float64) for i in idx])
        masks = [getattr(batch[i], "mask", None) for i in idx]
        mask = None if all(m is None for m in masks) else np.stack(
            [np.ones(len(times), bool) if m is None else np.asarray(m, bool) for m in masks])
        if isinstance(model, SpatioTemporalMGPVAE):
            for j, i in enumerate(idx):
                a, b, c = _st_terms(model, view, times, y[j], None if mask is None else mask[j], K, rngs[i])
                e1, e2, e3 = e1 + a, e2 + b, e3 + c
            continue
        sites, post = model.posterior(view, times, y, mask)
        e1 = e1 + e1_analytic(post, sites)
        e3 = e3 + ad.sum(post.log_partition)
        z = _sample_z(post, K, [rngs[i] for i in idx])           # (K, B, T, L)
        ll = model.log_likelihood(view, y[None], z)             # (K, B, T)
        if mask is not None:
            ll = ll * mask.astype(np.float64)
        e2 = e2 + ad.sum(ll) / K
    total = e3 + e2 - e1
    return ElboBreakdown(e1, e2, e3, total, e1 - e3, len(batch))


def _st_terms(model, view, times, y, mask, K, rng):
    sites, post = model.posterior(view, times, y, mask)
    e1 = e1_analytic(post, sites)
    e3 = ad.sum(post.log_partition)
    z = _sample_z(post, K, rng)                                 # (K, T, L*N)
    z = model.field_to_sites_layout(z)                          # (K, N, T, L)
    ll = model.log_likelihood(view, y[None], z)                 # (K, N, T)
    if mask is not None:
        ll = ll * np.asarray(mask, np.float64)
    return e1, ad.sum(ll) / K, e3


# --- importance-weighted likelihood -----------------------------------------------------------

def sample_paths(post: SmoothedPosterior, K: int, rngs) -> np.ndarray:
    """Joint draws of whole latent paths, shape (K, ..., T, L).

    Ancestral sampling backwards in time:
    s_T ~ q(s_T), then s_i | s_{i+1} ~ N(m_f + G (s_{i+1} - m_p), P_f - G P_p G^T).
    """
    fr = post.filter
    if fr is None or not post.smooth_cores:
        raise ValueError("joint sampling needs the filter and smoother passes")
    zs = []
    for l, (cf, sc, E) in enumerate(zip(fr.cores, post.smooth_cores, post.emissions)):
        E = np.asarray(ad.value(E))
        mf = [np.asarray(ad.value(x))[..., 0] for x in cf.m_filt]
        Pf = [np.asarray(ad.value(x)) for x in cf.P_filt]
        mp = [np.asarray(ad.value(x))[..., 0] for x in cf.m_pred]
        Pp = [np.asarray(ad.value(x)) for x in cf.P_pred]
        G = [np.asarray(ad.value(x)) for x in sc.gains]
        T = len(mf)
        d = mf[0].shape[-1]
        batch = mf[0].shape[:-1]
        noise = _path_noise(K, batch, T, d, rngs)               # (K, ..., T, d)
        s = [None] * T
        mT = np.asarray(ad.value(sc.m_smooth[-1]))[..., 0]
        PT = np.asarray(ad.value(sc.P_smooth[-1]))
        s[-1] = mT + (cholesky(PT).lower @ noise[..., -1, :, None])[..., 0]
        for i in range(T - 2, -1, -1):
            mean = mf[i] + (G[i] @ (s[i + 1] - mp[i + 1])[..., None])[..., 0]
            cov = Pf[i] - G[i] @ Pp[i + 1] @ np.swapaxes(G[i], -1, -2)
            cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
            try:
                chol = cholesky(cov).lower
            except NumericalError as exc:
                raise NumericalError(f"channel {l}: backward conditional not PSD at step {i}", step=i) from exc
            s[i] = mean + (chol @ noise[..., i, :, None])[..., 0]
        path = np.stack(s, axis=-2)                             # (K, ..., T, d)
        zs.append(path @ E.T)
    return np.concatenate(zs, axis=-1)


def _path_noise(K, batch, T, d, rngs):
    if isinstance(rngs, np.random.Generator):
        return rngs.standard_normal((K,) + batch + (T, d))
    return np.stack([g.standard_normal((K, T, d)) for g in rngs], axis=1)


@dataclass(frozen=True)
class IWEstimate:
    log_p_seen: np.ndarray     # (B,)
    log_p_missing: np.ndarray  # (B,)

    @property
    def nll(self) -> np.ndarray:
        return -(self.log_p_seen + self.log_p_missing)


def iw_log_likelihood(model, batch, K: int, rng: np.random.Generator, targets=None, view=None) -> IWEstimate:
    """Importance-weighted log-likelihood per sequence.

    Seen steps: log (1/K) sum_k p(Y|s_k) Z / prod_t N(Y~_t | H s_k, V~_t),
    with s_k whole paths from q.  Missing steps (mask False) are scored
    against ``targets`` by log (1/K) sum_k p(Y^c | z_k) under the same draws.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    batch = list(batch)
    for seq in batch:
        _check_nonempty(seq)
    if view is None:
        view, _ = model.view()
    rngs = child_rngs(rng, len(batch))
    seen = np.zeros(len(batch))
    missing = np.zeros(len(batch))
    for idx in group_by_times(batch):
        times = np.asarray(batch[idx[0]].times, dtype=np.float64)
        y = np.stack([np.asarray(batch[i].y, dtype=np.float64) for i in idx])
        mask = np.stack([np.ones(len(times), bool) if getattr(batch[i], "mask", None) is None
                         else np.asarray(batch[i].mask, bool) for i in idx])
        sites, post = model.posterior(view, times, y, mask)
        z = sample_paths(post, K, [rngs[i] for i in idx])       # (K, B, T, L)
        ll = np.asarray(model.log_likelihood(view, y[None], z))
        yt = np.asarray(ad.value(sites.y_tilde))
        vt = np.asarray(ad.value(sites.v_tilde))
        r = yt[None] - z
        site = np.sum(-0.5 * (LOG_2PI + np.log(vt)[None] + r * r / vt[None]), axis=-1)   # (K, B, T)
        logZ = np.asarray(ad.value(post.log_partition))
        w = np.sum((ll - site) * mask, axis=-1) + logZ
        seen[idx] = logsumexp(w, axis=0) - math.log(K)
        if targets is not None:
            tg = np.stack([np.asarray(targets[i], dtype=np.float64) for i in idx])
            lm = np.sum(np.asarray(model.log_likelihood(view, tg[None], z)) * ~mask, axis=-1)
            missing[idx] = logsumexp(lm, axis=0) - math.log(K)
    return IWEstimate(seen, missing)


def iw_nll(model, sequence, K: int, rng: np.random.Generator, target=None, view=None) -> float:
    """Importance-weighted negative log-likelihood of one sequence."""
    est = iw_log_likelihood(model, [sequence], K, rng, None if target is None else [target], view)
    return float(est.nll[0])
