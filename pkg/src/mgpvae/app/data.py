"""Synthetic datasets and their JSON-lines / CSV wire formats."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DimensionError
from ..oracle import SpatialKernelSpec, sample_separable_gp
from ..ssk import KernelSpec


@dataclass
class Sequence:
    """One observed sequence.

    ``mask[t]`` is False at dropped steps; ``y`` holds zeros there.  ``target``
    carries the clean signal when known (used for RMSE and missing-step NLL).
    """

    times: np.ndarray
    y: np.ndarray
    mask: np.ndarray | None = None
    target: np.ndarray | None = None
    loc: dict | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.times.ndim != 1:
            raise DimensionError("times must be 1-D")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.y.ndim != 2 or self.y.shape[0] != len(self.times):
            raise DimensionError(f"y has shape {self.y.shape}, expected ({len(self.times)}, D)")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.times.shape:
                raise DimensionError("mask length must match T")
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.float64)
            if self.target.shape != self.y.shape:
                raise DimensionError("target must have the same shape as y")

    @property
    def T(self) -> int:
        return len(self.times)

    @property
    def observed(self) -> np.ndarray:
        return np.ones(self.T, bool) if self.mask is None else self.mask

    def to_json(self) -> dict:
        d = {"times": self.times.tolist(), "y": self.y.tolist()}
        if self.mask is not None:
            d["mask"] = self.mask.tolist()
        if self.target is not None:
            d["target"] = self.target.tolist()
        if self.loc is not None:
            d["loc"] = self.loc
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Sequence":
        y = d["y"]
        D = len(y[0]) if y else 0
        return cls(np.array(d["times"], dtype=np.float64), np.array(y, dtype=np.float64).reshape(-1, D),
                   d.get("mask"), d.get("target"), d.get("loc"))


@dataclass
class SequenceDataset:
    sequences: list
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def __iter__(self):
        return iter(self.sequences)

    @property
    def data_dim(self) -> int:
        return self.sequences[0].y.shape[1]

    def save_jsonl(self, path) -> None:
        """First line is ``{"metadata": ...}``; each further line one sequence."""
        with open(path, "w") as f:
            f.write(json.dumps({"metadata": self.metadata}) + "\n")
            for s in self.sequences:
                f.write(json.dumps(s.to_json(), allow_nan=False) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "SequenceDataset":
        seqs, meta = [], {}
        with open(path) as f:
            for n, line in enumerate(f):
                if not line.strip():
                    continue
                d = json.loads(line)
                if n == 0 and "metadata" in d:
                    meta = d["metadata"]
                    continue
                seqs.append(Sequence.from_json(d))
        if not seqs:
            raise ConfigError(f"{path}: no sequences")
        return cls(seqs, meta)

    def save_csv(self, path) -> None:
        """Flat long format: one row per (sequence, step)."""
        D = self.data_dim
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seq", "t", "observed"] + [f"y{j}" for j in range(D)]
                       + [f"target{j}" for j in range(D)])
            for i, s in enumerate(self.sequences):
                tg = s.target if s.target is not None else np.full_like(s.y, np.nan)
                for k in range(s.T):
                    w.writerow([i, repr(float(s.times[k])), int(s.observed[k])]
                               + [repr(float(x)) for x in s.y[k]] + [repr(float(x)) for x in tg[k]])


# --- fixed random smooth maps ---------------------------------------------------------

def random_smooth_map(in_dim: int, out_dim: int, rng: np.random.Generator, hidden: int = 16):
    """A fixed tanh MLP; returns a vectorized callable on (..., in_dim)."""
    W1 = rng.normal(0.0, 1.5 / math.sqrt(in_dim), (in_dim, hidden))
    b1 = rng.normal(0.0, 0.5, hidden)
    W2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, out_dim))

    def fn(x):
        return np.tanh(np.asarray(x) @ W1 + b1) @ W2

    return fn


# --- rotating dataset --------------------------------------------------------------------

@dataclass
class Split:
    train: SequenceDataset
    test: SequenceDataset


@dataclass
class RotatingData:
    clean: Split
    corrupt: Split
    missing: Split

    def variant(self, task: str) -> Split:
        if task not in ("clean", "corrupt", "missing"):
            raise ConfigError(f"unknown rotating-data variant {task!r}")
        return getattr(self, task)


def gen_rotating(num_train: int, num_test: int, T: int = 100, period: float = 50.0, data_dim: int = 8,
                 seed: int = 0, noise_std: float = 0.05, drop_frac: float = 0.4) -> RotatingData:
    """Observations of a point moving round a circle, seen through a fixed random map.

    The latent path is (cos, sin) of an angle advancing by 2 pi every
    ``period`` steps from a random phase.  The map is centred over one
    revolution so the zero predictor is the natural baseline.
    """
    if data_dim < 2:
        raise ConfigError("data_dim must be at least 2")
    if num_train < 0 or num_test < 0 or T < 1 or period <= 0:
        raise ConfigError("invalid dataset sizes")
    if not 0.0 <= drop_frac < 1.0:
        raise ConfigError("drop_frac must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    raw = random_smooth_map(2, data_dim, rng)
    grid = 2 * np.pi * np.arange(1024) / 1024
    offset = raw(np.stack([np.cos(grid), np.sin(grid)], -1)).mean(axis=0)
    scale = 1.0 / np.sqrt(np.mean((raw(np.stack([np.cos(grid), np.sin(grid)], -1)) - offset) ** 2))

    def fmap(x):
        return scale * (raw(x) - offset)

    times = np.arange(T, dtype=np.float64)
    n = num_train + num_test
    phase = rng.uniform(0, 2 * np.pi, n)
    theta = 2 * np.pi * times[None, :] / period + phase[:, None]
    clean = fmap(np.stack([np.cos(theta), np.sin(theta)], -1))          # (n, T, D)
    noisy = clean + noise_std * rng.standard_normal(clean.shape)
    coord_keep = rng.random(clean.shape) >= drop_frac
    step_keep = rng.random((n, T)) >= drop_frac
    step_keep[np.arange(n), rng.integers(0, T, n)] = True              # never empty

    meta = dict(generator="rotating", seed=seed, T=T, period=period, data_dim=data_dim,
                noise_std=noise_std, drop_frac=drop_frac)

    def build(kind, idx):
        seqs = []
        for i in idx:
            if kind == "clean":
                seqs.append(Sequence(times, noisy[i], None, clean[i]))
            elif kind == "corrupt":
                seqs.append(Sequence(times, noisy[i] * coord_keep[i], None, clean[i]))
            else:
                seqs.append(Sequence(times, noisy[i] * step_keep[i][:, None], step_keep[i], clean[i]))
        return SequenceDataset(seqs, dict(meta, corruption=kind))

    tr, te = range(num_train), range(num_train, n)
    return RotatingData(*(Split(build(k, tr), build(k, te)) for k in ("clean", "corrupt", "missing")))


# --- spatiotemporal dataset ------------------------------------------------------------------

@dataclass
class SpatioTemporalData:
    train: SequenceDataset   # one sequence per training location
    test: SequenceDataset    # one sequence per held-out location
    latent: np.ndarray       # (L, N_r, T) true latent field


def gen_spatiotemporal(n_locations: int, T: int, data_dim: int, seed: int = 0, n_test: int = 1,
                       latent_dim: int = 1, spatial_lengthscale: float = 0.5,
                       temporal_family: str = "matern32", temporal_lengthscale: float = 5.0,
                       noise_std: float = 0.05) -> SpatioTemporalData:
    """Latent separable GP on random 2-d locations, decoded by a fixed random map."""
    if n_locations < 1 or T < 1 or data_dim < 1 or latent_dim < 1:
        raise ConfigError("invalid dataset sizes")
    if n_locations == 1:
        n_test = 0
    if not 0 <= n_test < n_locations:
        raise ConfigError("n_test must leave at least one training location")
    rng = np.random.default_rng(seed)
    R = rng.uniform(0, 1, (n_locations, 2))
    times = np.arange(T, dtype=np.float64)
    spatial = SpatialKernelSpec("matern32", (spatial_lengthscale, spatial_lengthscale))
    temporal = KernelSpec.create(temporal_family, 1.0, temporal_lengthscale)
    Z = np.concatenate([sample_separable_gp(spatial, temporal, R, times, 1, rng, nugget=1e-6)
                        for _ in range(latent_dim)])                       # (L, N, T)
    fmap = random_smooth_map(latent_dim, data_dim, rng)
    clean = fmap(np.moveaxis(Z, 0, -1))                                    # (N, T, D)
    noisy = clean + noise_std * rng.standard_normal(clean.shape)
    test_idx = set(rng.choice(n_locations, n_test, replace=False).tolist()) if n_test else set()
    meta = dict(generator="spatiotemporal", seed=seed, T=T, data_dim=data_dim, n_locations=n_locations,
                latent_dim=latent_dim, noise_std=noise_std)

    def build(ids):
        return SequenceDataset([Sequence(times, noisy[i], None, clean[i], {"id": int(i), "coords": R[i].tolist()})
                                for i in ids], dict(meta))

    train_ids = [i for i in range(n_locations) if i not in test_idx]
    return SpatioTemporalData(build(train_ids), build(sorted(test_idx)), Z)


def locations_of(ds: SequenceDataset) -> np.ndarray:
    if any(s.loc is None for s in ds):
        raise ConfigError("dataset has no spatial locations")
    return np.array([s.loc["coords"] for s in ds], dtype=np.float64)


def field_of(ds: SequenceDataset):
    """Stack a spatiotemporal split into (times, Y (N_r, T, D), mask or None)."""
    times = ds[0].times
    if any(not np.array_equal(s.times, times) for s in ds):
        raise DimensionError("all locations must share one time grid")
    Y = np.stack([s.y for s in ds])
    masks = [s.mask for s in ds]
    if all(m is None for m in masks):
        return times, Y, None
    obs = np.stack([s.observed for s in ds])
    if not np.all(obs == obs[0]):
        raise DimensionError("per-location masks must agree")
    return times, Y, obs[0]
