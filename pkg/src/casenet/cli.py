"""``casenet`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import atomic_write_text, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (GENERATORS, Dataset, gen_causal_probe, load_dataset, save_dataset, split,
                   split_fingerprint, zscore_normalize)
from .errors import CaseNetError, ConfigError, ContractError, DatasetError, NumericalError
from .layers import ModelConfig, init_params
from .trainer import build_variant, evaluate, fit, gradient_report, predict

log = logging.getLogger("casenet")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
GRAD_TOL = 1e-4
METRICS = ("accuracy", "macro_f1", "mcc")


class UsageError(CaseNetError):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1) + "\n")


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation; the std of a single value is 0."""
    vals = [float(v) for v in values]
    return statistics.fmean(vals), (statistics.stdev(vals) if len(vals) > 1 else 0.0)


# ---------------------------------------------------------------- shared setup

def _load_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        rc.seeds = [args.seed]
    if getattr(args, "out", None) is not None:
        rc.out_dir = args.out
    if getattr(args, "parallel", None) is not None:
        rc.parallel = args.parallel
    return rc


def _prepare(rc: RunConfig):
    """Load, split and z-score the configured dataset using training-split statistics."""
    if not rc.dataset:
        raise ConfigError("config key 'dataset' is required")
    ds = load_dataset(rc.dataset)
    tr, va, te = split(ds, tuple(rc.split), seed=rc.split_seed)
    if len(va) == 0 or len(te) == 0:
        raise ConfigError("validation and test splits must be non-empty")
    tr, stats = zscore_normalize(tr)
    va, _ = zscore_normalize(va, stats)
    te, _ = zscore_normalize(te, stats)
    cfg = rc.model_config(ds.n_channels, ds.length, ds.n_classes)
    return cfg, (tr, va, te), stats


def _run_one(cfg: ModelConfig, rc_dict: dict, splits, seed: int):
    """Fit one seed and score it on the test split. Top-level so worker processes can pickle it."""
    rc = RunConfig.from_dict(rc_dict)
    tr, va, te = splits
    params, record = fit(cfg, tr, va, rc.train_config(), seed=seed)
    _, test_m = evaluate(params, cfg, te)
    return params, record, test_m


def _run_seeds(cfg: ModelConfig, rc: RunConfig, splits) -> list:
    if rc.parallel > 1 and len(rc.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(rc.parallel, len(rc.seeds))) as pool:
            futures = [pool.submit(_run_one, cfg, rc.to_dict(), splits, s) for s in rc.seeds]
            return [f.result() for f in futures]
    return [_run_one(cfg, rc.to_dict(), splits, s) for s in rc.seeds]


def _summary(rows: list[dict]) -> dict:
    out = {}
    for m in METRICS:
        mu, sd = mean_std([r[m] for r in rows])
        out[m] = {"mean": mu, "std": sd, "values": [r[m] for r in rows]}
    return out


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be a positive integer")
    ds = GENERATORS[args.kind](args.n, seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    print(f"K={ds.n_classes} N={ds.n_channels} L={ds.length} class_counts={ds.class_counts()}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _load_config(args)
    cfg, splits, stats = _prepare(rc)
    cfg = build_variant(rc.variant, cfg)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    print(f"split fingerprint {split_fingerprint(*splits)}")
    rows = []
    for seed, (params, record, test_m) in zip(rc.seeds, _run_seeds(cfg, rc, splits)):
        run = record.to_dict()
        run["test_metrics"] = test_m.to_dict()
        _write_json(out / f"run_{seed}.json", run)
        save_checkpoint(out / f"model_{seed}.ckpt", params, cfg, stats,
                        extra={"seed": seed, "variant": rc.variant})
        rows.append({m: getattr(test_m, m) for m in METRICS})
        print(f"seed {seed}: best epoch {record.best_epoch} "
              + " ".join(f"{m}={getattr(test_m, m):.4f}" for m in METRICS))
    summary = {"variant": rc.variant, "seeds": rc.seeds, "test": _summary(rows)}
    _write_json(out / "summary.json", summary)
    for m in METRICS:
        s = summary["test"][m]
        print(f"{m}: {100 * s['mean']:.2f} ± {100 * s['std']:.2f}")
    return EXIT_OK


def _check_compatible(cfg: ModelConfig, ds: Dataset) -> None:
    if (ds.n_channels, ds.length) != (cfg.n_channels, cfg.length):
        raise ContractError(f"dataset has N={ds.n_channels}, L={ds.length} but checkpoint expects "
                            f"N={cfg.n_channels}, L={cfg.length}")
    if ds.n_classes > cfg.n_classes:
        raise ContractError(f"dataset has {ds.n_classes} classes but checkpoint has {cfg.n_classes}")


def _load_for_inference(args):
    params, cfg, stats, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    _check_compatible(cfg, ds)
    if stats is not None:
        ds, _ = zscore_normalize(ds, stats)
    return params, cfg, ds


def cmd_eval(args) -> int:
    params, cfg, ds = _load_for_inference(args)
    lb, m = evaluate(params, cfg, ds)
    result = {"n": len(ds), "loss": lb.to_dict(), "metrics": m.to_dict()}
    if args.out:
        _write_json(Path(args.out), result)
    print(json.dumps(result["metrics"]))
    return EXIT_OK


def _table(rows: dict) -> tuple[str, str]:
    head = ["Variant", "Acc", "F1", "MCC"]
    md = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant"] + [f"{m}_{k}" for m in METRICS for k in ("mean", "std")])
    for name, summ in rows.items():
        cells = [f"{100 * summ[m]['mean']:.2f} ± {100 * summ[m]['std']:.2f}" for m in METRICS]
        md.append(f"| {name} | " + " | ".join(cells) + " |")
        w.writerow([name] + [repr(summ[m][k]) for m in METRICS for k in ("mean", "std")])
    return "\n".join(md) + "\n", buf.getvalue()


def cmd_ablate(args) -> int:
    rc = _load_config(args)
    base, splits, _ = _prepare(rc)
    fingerprint = split_fingerprint(*splits)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for name in rc.variants:
        cfg = build_variant(name, base)
        print(f"variant {name}: split fingerprint {fingerprint}")
        runs = _run_seeds(cfg, rc, splits)
        results[name] = _summary([{m: getattr(t, m) for m in METRICS} for _, _, t in runs])
    md, table_csv = _table(results)
    atomic_write_text(out / "ablation.md", md)
    atomic_write_text(out / "ablation.csv", table_csv)
    _write_json(out / "ablation.json", {"split_fingerprint": fingerprint, "seeds": rc.seeds,
                                        "results": results})
    print(md, end="")
    return EXIT_OK


def grad_check_config(rc: RunConfig) -> ModelConfig:
    """The configured model shrunk to N=3, L=16, S=2, D=8."""
    cfg = rc.model_config(3, 16, 2)
    return ModelConfig.from_dict({**cfg.to_dict(), "n_scales": 2, "hidden_dim": 8,
                                  "n_heads": 2 if 8 % cfg.n_heads else cfg.n_heads,
                                  "se_ratio": 4 if 8 % cfg.se_ratio else cfg.se_ratio})


def cmd_grad_check(args) -> int:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = grad_check_config(rc)
    ds = gen_causal_probe(2, N=3, L=16, seed=args.seed)
    params = init_params(cfg, np.random.default_rng(args.seed))
    report = gradient_report(params, cfg, ds.x, ds.y)
    width = max(len(k) for k in report)
    for name, err in report.items():
        status = "ok" if err <= GRAD_TOL else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
    worst = max(report, key=report.get)
    print(f"max relative error {report[worst]:.3e} ({worst}); tolerance {GRAD_TOL:g}")
    return EXIT_OK if report[worst] <= GRAD_TOL else EXIT_NUMERICAL


def cmd_export_embeddings(args) -> int:
    params, cfg, ds = _load_for_inference(args)
    _, fused = predict(params, cfg, ds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{i}" for i in range(fused.shape[1])] + ["label"])
    for row, label in zip(fused, ds.y):
        w.writerow([repr(float(v)) for v in row] + [int(label)])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, buf.getvalue())
    print(f"wrote {len(ds)} rows x {fused.shape[1]} features to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="casenet", description="Causal multi-scale MTS classifier tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--kind", required=True, choices=sorted(GENERATORS),
                   help="generator to use")
    g.add_argument("--n", type=int, required=True, help="number of samples (>= 1)")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit one model per seed and summarize test metrics")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--seed", type=int, help="train only this seed (overrides 'seeds')")
    t.add_argument("--out", help="output directory (overrides 'out_dir')")
    t.add_argument("--parallel", type=int, help="worker processes for the seed loop")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True, help="checkpoint directory")
    e.add_argument("--data", required=True, help="dataset directory or manifest")
    e.add_argument("--out", help="write the metrics JSON here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train every ablation variant on the same split")
    a.add_argument("--config", required=True, help="run config JSON")
    a.add_argument("--seed", type=int, help="use only this seed (overrides 'seeds')")
    a.add_argument("--out", help="output directory (overrides 'out_dir')")
    a.add_argument("--parallel", type=int, help="worker processes for each seed loop")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("grad-check", help="finite-difference check of every parameter gradient")
    c.add_argument("--config", help="run config JSON (model sizes are forced small)")
    c.add_argument("--seed", type=int, default=0, help="seed for weights and inputs")
    c.set_defaults(func=cmd_grad_check)

    x = sub.add_parser("export-embeddings", help="write fused descriptors and labels as CSV")
    x.add_argument("--checkpoint", required=True, help="checkpoint directory")
    x.add_argument("--data", required=True, help="dataset directory or manifest")
    x.add_argument("--out", required=True, help="output CSV path")
    x.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"casenet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"casenet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DatasetError, ContractError) as exc:
        print(f"casenet: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"casenet: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
