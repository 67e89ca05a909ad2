"""Test metrics: reconstruction RMSE, importance-weighted NLL, spatiotemporal NLPD."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ..errors import ConfigError
from ..model import MGPVAE, SpatioTemporalMGPVAE
from ..nn import autodiff as ad
from ..stgp import st_predict
from ..vi import group_by_times, iw_log_likelihood
from .data import SequenceDataset, field_of, locations_of

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class EvalResult:
    rmse: float
    rmse_missing: float | None
    rmse_baseline: float
    rmse_missing_baseline: float | None
    nll: float | None
    nlpd: float | None = None
    per_sequence: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("rmse", "rmse_missing", "rmse_baseline",
                                              "rmse_missing_baseline", "nll", "nlpd")}


def _rmse(sq_err: float, count: int) -> float | None:
    return None if count == 0 else math.sqrt(sq_err / count)


def reconstruct(model: MGPVAE, ds: SequenceDataset) -> list[np.ndarray]:
    """Decoded posterior mean on every step of every sequence (missing steps included)."""
    view, _ = model.view()
    out = [None] * len(ds)
    for idx in group_by_times(ds.sequences):
        seqs = [ds[i] for i in idx]
        y = np.stack([s.y for s in seqs])
        mask = np.stack([s.observed for s in seqs])
        _, post = model.posterior(view, seqs[0].times, y, mask)
        rec = np.asarray(model.decode(view, np.asarray(post.z_mean())))
        for j, i in enumerate(idx):
            out[i] = rec[j]
    return out


def evaluate(model: MGPVAE, ds: SequenceDataset, task: str, K: int = 20, seed: int = 0,
             train_ds: SequenceDataset | None = None) -> EvalResult:
    """Metrics for one dataset split.

    Temporal tasks score the decoded posterior mean against ``target`` (the
    clean signal) and the zero predictor as a baseline; NLL is the
    importance-weighted estimate, with missing steps scored against their
    targets.  The spatiotemporal task conditions on ``train_ds`` and scores
    the held-out locations in ``ds``.
    """
    if task == "spatiotemporal":
        if not isinstance(model, SpatioTemporalMGPVAE):
            raise ConfigError("spatiotemporal evaluation needs a spatiotemporal model")
        if train_ds is None:
            raise ConfigError("spatiotemporal evaluation needs the training locations")
        return evaluate_spatiotemporal(model, train_ds, ds, K, seed)
    if isinstance(model, SpatioTemporalMGPVAE):
        raise ConfigError(f"task {task!r} does not match a spatiotemporal model")
    if any(s.loc is not None for s in ds):
        raise ConfigError(f"dataset layout is spatiotemporal but task is {task!r}")
    recs = reconstruct(model, ds)
    se = se0 = sem = sem0 = 0.0
    n = nm = 0
    per = []
    targets = [s.target if s.target is not None else s.y for s in ds]
    for s, rec, tg in zip(ds, recs, targets):
        err = (rec - tg) ** 2
        miss = ~s.observed
        se += err.sum()
        se0 += (tg ** 2).sum()
        n += err.size
        sem += err[miss].sum()
        sem0 += (tg[miss] ** 2).sum()
        nm += err[miss].size
        per.append({"rmse": math.sqrt(err.mean()),
                    "rmse_missing": math.sqrt(err[miss].mean()) if miss.any() else None})
    est = iw_log_likelihood(model, ds.sequences, K, np.random.default_rng(seed), targets=targets)
    for row, v in zip(per, est.nll):
        row["nll"] = float(v)
    return EvalResult(_rmse(se, n), _rmse(sem, nm), _rmse(se0, n), _rmse(sem0, nm),
                      float(np.mean(est.nll)), None, per)


def evaluate_spatiotemporal(model: SpatioTemporalMGPVAE, train_ds: SequenceDataset, test_ds: SequenceDataset,
                            K: int = 20, seed: int = 0) -> EvalResult:
    """RMSE and NLPD at held-out locations.

    NLPD per (location, step) is -log (1/K) sum_k N(y; decode(z_k), noise I)
    with z_k drawn from the predictive marginal of the latent field.
    """
    view, _ = model.view()
    times, Y, mask = field_of(train_ds)
    _, post = model.posterior(view, times, Y, mask)
    st = model.st_state(view)
    R_star = locations_of(test_ds)
    pred = st_predict(st, post, R_star)
    mean = np.moveaxis(pred.mean, -1, 0)                   # (M, T, L)
    var = np.moveaxis(pred.var, -1, 0)
    y_true = np.stack([s.y for s in test_ds])               # (M, T, D)
    tg = np.stack([s.target if s.target is not None else s.y for s in test_ds])
    rec = np.asarray(model.decode(view, mean))
    rng = np.random.default_rng(seed)
    z = mean[None] + np.sqrt(np.maximum(var, 0.0))[None] * rng.standard_normal((K,) + mean.shape)
    ll = np.asarray(model.log_likelihood(view, y_true[None], z))   # (K, M, T)
    lp = logsumexp(ll, axis=0) - math.log(K)
    D = y_true.shape[-1]
    nlpd = float(-np.mean(lp) / D)
    err = (rec - tg) ** 2
    per = [{"location": s.loc["id"], "rmse": math.sqrt(err[i].mean()), "nlpd": float(-lp[i].mean() / D)}
           for i, s in enumerate(test_ds)]
    return EvalResult(math.sqrt(err.mean()), None, math.sqrt((tg ** 2).mean()), None, None, nlpd, per)
