"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from ..errors import MGPVAEError, NumericalError
from ..nn.checkpoint import load_checkpoint
from .benchmark import benchmark, write_csv
from .config import ExperimentConfig, load_config
from .data import SequenceDataset, gen_rotating, gen_spatiotemporal, locations_of
from .evaluate import evaluate, reconstruct
from .oraclecheck import TOLERANCES, run_oracle_check
from .train import model_from_checkpoint, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def make_datasets(cfg: ExperimentConfig, seed: int) -> tuple[SequenceDataset, SequenceDataset]:
    d = cfg.data
    if d.task == "spatiotemporal":
        st = gen_spatiotemporal(d.n_locations, d.T, d.data_dim, seed=seed, n_test=d.n_test_locations,
                                latent_dim=cfg.model.latent_dim, noise_std=d.noise_std)
        return st.train, st.test
    rot = gen_rotating(d.num_train, d.num_test, T=d.T, period=d.period, data_dim=d.data_dim, seed=seed,
                       noise_std=d.noise_std, drop_frac=d.drop_frac)
    split = rot.variant(d.task)
    return split.train, split.test


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(data_dir: Path, name: str) -> SequenceDataset:
    return SequenceDataset.load_jsonl(data_dir / f"{name}.jsonl")


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = _out(args)
    tr, te = make_datasets(cfg, cfg.train.seed)
    tr.save_jsonl(out / "train.jsonl")
    te.save_jsonl(out / "test.jsonl")
    tr.save_csv(out / "train.csv")
    te.save_csv(out / "test.csv")
    print(f"wrote {len(tr)} train and {len(te)} test sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    if args.data:
        tr = _load_split(Path(args.data), "train")
    else:
        tr, _ = make_datasets(cfg, cfg.train.seed)
    res = train(cfg, tr, out_dir=out, resume=args.resume)
    last = res.history[-1] if res.history else None
    if last is not None:
        print(f"epoch {last['epoch']}: elbo {last['elbo']:.4f}")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    seed = cfg.train.seed if args.seed is None else args.seed
    if args.data:
        tr, te = _load_split(Path(args.data), "train"), _load_split(Path(args.data), "test")
    else:
        tr, te = make_datasets(cfg, cfg.train.seed)
    K = args.k if args.k is not None else cfg.train.k_eval
    res = evaluate(model, te, cfg.data.task, K=K, seed=seed, train_ds=tr)
    doc = res.as_dict()
    if args.out:
        out = _out(args)
        with open(out / "eval.json", "w") as f:
            json.dump({**doc, "per_sequence": res.per_sequence}, f, indent=1)
    print(json.dumps(doc))
    return EXIT_OK


def cmd_predict(args) -> int:
    """Decoded posterior means: at query times (temporal) or new locations (spatiotemporal)."""
    model, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    ds = SequenceDataset.load_jsonl(args.data)
    out = _out(args)
    view, _ = model.view()
    rows = []
    if cfg.data.task == "spatiotemporal":
        from ..stgp import st_predict
        from .data import field_of
        if not args.locations:
            raise ValueError("--locations is required for spatiotemporal prediction")
        R_star = np.array([[float(x) for x in p.split(",")] for p in args.locations.split(";")])
        times, Y, mask = field_of(ds)
        _, post = model.posterior(view, times, Y, mask)
        pred = st_predict(model.st_state(view), post, R_star)
        rec = np.asarray(model.decode(view, np.moveaxis(pred.mean, -1, 0)))     # (M, T, D)
        for m in range(rec.shape[0]):
            for k, t in enumerate(times):
                rows.append([f"loc{m}", t, *rec[m, k]])
    else:
        if args.times:
            q = np.array([float(x) for x in args.times.split(",")])
            for i, s in enumerate(ds):
                _, post = model.posterior(view, s.times, s.y, s.observed, query_times=q)
                grid = post.times
                idx = np.searchsorted(grid, q)
                rec = np.asarray(model.decode(view, np.asarray(post.z_mean())[idx]))
                for k, t in enumerate(q):
                    rows.append([i, t, *rec[k]])
        else:
            for i, (s, rec) in enumerate(zip(ds, reconstruct(model, ds))):
                for k, t in enumerate(s.times):
                    rows.append([i, t, *rec[k]])
    D = cfg.data.data_dim
    import csv
    with open(out / "predictions.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seq", "t"] + [f"y{j}" for j in range(D)])
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
    print(f"wrote {len(rows)} rows to {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    out = _out(args)
    grid = [int(x) for x in args.T_grid.split(",")]
    rows = benchmark(tuple(args.families.split(",")), grid, args.repeats, seed=args.seed or 0)
    write_csv(out / "benchmark.csv", rows)
    for r in rows:
        print(f"T={r['T']:6d} d={r['d']} median={r['median_s']:.4f}s p90={r['p90_s']:.4f}s")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    worst = run_oracle_check(seed=args.seed or 0)
    ok = True
    for k, v in worst.items():
        passed = v < TOLERANCES[k]
        ok &= passed
        print(f"{k:20s} max_err={v:.3e} tol={TOLERANCES[k]:.0e} {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment configuration")
    common.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread limit (1 = bit-exact runs)")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="mgpvae", description="Markovian GP-VAE toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.set_defaults(fn=cmd_gen)
    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="directory with train.jsonl (generated from the config if omitted)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(fn=cmd_train)
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="directory with train.jsonl and test.jsonl")
    e.add_argument("--k", type=int, default=None, help="importance samples (default train.k_eval)")
    e.set_defaults(fn=cmd_eval)
    pr = sub.add_parser("predict", parents=[common], help="decoded posterior means")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True, help="JSON-lines dataset to condition on")
    pr.add_argument("--times", help="comma-separated query times (temporal models)")
    pr.add_argument("--locations", help="'x,y;x,y' query locations (spatiotemporal models)")
    pr.set_defaults(fn=cmd_predict)
    b = sub.add_parser("benchmark", parents=[common], help="time filter+smooth against T")
    b.add_argument("--T-grid", dest="T_grid", default="512,1024,2048,4096")
    b.add_argument("--families", default="matern32,matern52")
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(fn=cmd_benchmark)
    o = sub.add_parser("oracle-check", parents=[common], help="dense vs Markovian equivalence")
    o.set_defaults(fn=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    limit = nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(limits=args.threads)
    try:
        with limit:
            return args.fn(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MGPVAEError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
