"""Wall-clock timing of filter + smooth against sequence length and state size."""

from __future__ import annotations

import csv
import time

import numpy as np

from ..kalman import GaussianSites, filter_smooth
from ..ssk import STATE_DIM, KernelSpec, canonical_family, to_state_space

COLUMNS = ("T", "d", "median_s", "p90_s")


def time_filter_smooth(family: str, T: int, repeats: int = 5, seed: int = 0) -> list[float]:
    rng = np.random.default_rng([seed, T])
    times = np.cumsum(rng.uniform(0.5, 1.5, T))
    ss = to_state_space(KernelSpec.create(family, 1.0, 0.1 * float(times[-1] - times[0] + 1.0)))
    sites = GaussianSites(times, rng.standard_normal((T, 1)), rng.uniform(0.1, 1.0, (T, 1)))
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        filter_smooth([ss], sites)
        out.append(time.perf_counter() - t0)
    return out


def benchmark(families=("matern32",), T_grid=(512, 1024, 2048, 4096), repeats: int = 5, seed: int = 0) -> list[dict]:
    rows = []
    for fam in families:
        fam = canonical_family(fam)
        for T in T_grid:
            ts = np.array(time_filter_smooth(fam, int(T), repeats, seed))
            rows.append({"T": int(T), "d": STATE_DIM[fam], "median_s": float(np.median(ts)),
                         "p90_s": float(np.percentile(ts, 90))})
    return rows


def write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in COLUMNS})


def read_csv(path) -> list[dict]:
    with open(path) as f:
        return [{"T": int(r["T"]), "d": int(r["d"]), "median_s": float(r["median_s"]), "p90_s": float(r["p90_s"])}
                for r in csv.DictReader(f)]


def scaling_ratio(rows: list[dict], d: int, T_small: int, T_large: int) -> float:
    by_T = {r["T"]: r["median_s"] for r in rows if r["d"] == d}
    return by_T[T_large] / by_T[T_small]
