"""Mini-batch Adam ascent on the ELBO, with metrics logging and checkpoints."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import NumericalError
from ..model import MGPVAE, SpatioTemporalMGPVAE
from ..nn import autodiff as ad
from ..nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ..nn.optim import AdamState, adam_step
from ..vi import elbo
from .config import ExperimentConfig, config_from_dict
from .data import SequenceDataset, Sequence, field_of, locations_of

METRIC_COLUMNS = ("epoch", "elbo", "e1", "e2", "e3", "wall_s")


class TrainingAborted(NumericalError):
    """Raised on a non-finite objective or gradient; ``checkpoint`` is the last good state."""

    def __init__(self, message, checkpoint_path=None, epoch=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
        self.epoch = epoch


@dataclass
class TrainResult:
    model: MGPVAE
    history: list = field(default_factory=list)   # dicts keyed by METRIC_COLUMNS
    optimizer: AdamState | None = None
    checkpoint_path: Path | None = None


def time_span(ds: SequenceDataset) -> float:
    return max(float(s.times[-1] - s.times[0]) for s in ds) or 1.0


def build_model(cfg: ExperimentConfig, ds: SequenceDataset, params=None) -> MGPVAE:
    rng = np.random.default_rng([cfg.train.seed, 0])
    mc = cfg.model_config()
    if cfg.data.task == "spatiotemporal":
        return SpatioTemporalMGPVAE(mc, locations_of(ds), params=params, rng=rng, time_span=time_span(ds))
    return MGPVAE(mc, params=params, rng=rng, time_span=time_span(ds))


def training_items(cfg: ExperimentConfig, ds: SequenceDataset) -> list:
    """Sequences for the temporal tasks; one stacked field for the spatiotemporal task."""
    if cfg.data.task == "spatiotemporal":
        times, Y, mask = field_of(ds)
        return [_Field(times, Y, mask)]
    return list(ds.sequences)


@dataclass
class _Field:
    times: np.ndarray
    y: np.ndarray
    mask: np.ndarray | None


def model_checkpoint(model: MGPVAE, cfg: ExperimentConfig, opt: AdamState | None, epoch: int) -> Checkpoint:
    extra = {}
    if isinstance(model, SpatioTemporalMGPVAE):
        extra["locations"] = model.R.tolist()
    return Checkpoint(model.params.copy(), None if opt is None else opt.copy(), cfg.to_dict(), epoch, extra)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[MGPVAE, ExperimentConfig]:
    cfg = config_from_dict(ckpt.config)
    mc = cfg.model_config()
    if cfg.data.task == "spatiotemporal":
        model = SpatioTemporalMGPVAE(mc, np.array(ckpt.extra["locations"]), params=ckpt.params)
    else:
        model = MGPVAE(mc, params=ckpt.params)
    return model, cfg


def write_metrics(path, history: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]])


def read_metrics(path) -> list:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in METRIC_COLUMNS[1:]}} for r in rows]


def train(cfg: ExperimentConfig, ds: SequenceDataset, out_dir=None, resume=None,
          callback=None, model: MGPVAE | None = None) -> TrainResult:
    """Train for ``cfg.train.epochs`` epochs.

    Each epoch draws its shuffle and Monte-Carlo noise from a stream seeded
    by ``(seed, epoch)``, so resuming from a checkpoint replays the same
    subsequent updates.  ``callback(epoch, model)`` runs after every epoch.
    With ``out_dir``, ``metrics.csv`` and ``checkpoint.json`` are written
    after every epoch.
    """
    tc = cfg.train
    history: list = []
    start = 0
    opt = None
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        model, _ = model_from_checkpoint(ckpt)
        opt = ckpt.optimizer
        start = ckpt.epoch
        history = list(ckpt.extra.get("history", []))
    elif model is None:
        model = build_model(cfg, ds)
    if opt is None:
        opt = AdamState.zeros(model.params.layout.size)
    items = training_items(cfg, ds)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_path = None if out is None else out / "checkpoint.json"
    last_good = model_checkpoint(model, cfg, opt, start)
    last_good.extra["history"] = list(history)

    for epoch in range(start + 1, tc.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([tc.seed, epoch])
        order = rng.permutation(len(items))
        sums = dict(elbo=0.0, e1=0.0, e2=0.0, e3=0.0)
        n_seen = 0
        for b in range(0, len(items), tc.batch_size):
            batch = [items[i] for i in order[b:b + tc.batch_size]]
            try:
                tape = ad.Tape()
                view, leaf = model.view(tape)
                br = elbo(model, batch, tc.k_train, rng, view=view)
                loss = -br.elbo / br.n_sequences
                if not np.isfinite(ad.value(loss)):
                    raise NumericalError(f"non-finite ELBO at epoch {epoch}")
                grad = ad.backward(tape, loss, leaf)
                new, opt, _ = adam_step(model.params.vector, grad, opt, tc.lr,
                                        clip_norm=tc.clip_norm, layout=model.params.layout)
            except NumericalError as exc:
                if ckpt_path is not None:
                    save_checkpoint(ckpt_path, last_good)
                raise TrainingAborted(f"training aborted at epoch {epoch}: {exc}", ckpt_path, epoch) from exc
            model.params.vector = new
            for k, v in br.as_floats().items():
                if k in sums:
                    sums[k] += v
            n_seen += br.n_sequences
        row = {"epoch": epoch, **{k: v / n_seen for k, v in sums.items()},
               "wall_s": time.perf_counter() - t0}
        history.append(row)
        last_good = model_checkpoint(model, cfg, opt, epoch)
        last_good.extra["history"] = list(history)
        if out is not None:
            save_checkpoint(ckpt_path, last_good)
            write_metrics(out / "metrics.csv", history)
        if callback is not None:
            callback(epoch, model)
    return TrainResult(model, history, opt, ckpt_path)
