"""Command-line front end: ``memtl <command> [options]``.

Commands
--------
init-config   write a config file holding every default
gen-data      sample and label a dataset (JSON lines)
train         train an ``mtfnn`` or ``memtl`` bundle
eval          score a bundle on a dataset (one-row TSV)
bench         N x M grid of both models on drift splits (table1.tsv, table2.tsv)
decompose     error-ambiguity decomposition of a bundle (TSV)
converge      head-only vs from-scratch loss curves (curves.tsv, summary.tsv)

Exit codes: 0 success, 1 unexpected failure, 2 invalid input, 3 unlabelable
sampling ranges, 4 training divergence, 5 missing input artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from memtl.analysis import (
    benchmark,
    convergence_compare,
    decompose,
    efficiency_table,
    evaluate,
)
from memtl.config import RunConfig
from memtl.dataset import Dataset, generate_dataset, shift_split
from memtl.errors import InvalidParameterError, TrainingDiverged, UnlabelableError
from memtl.model import MemtlModel, train_memtl, train_mtfnn

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_UNLABELABLE = 3
EXIT_DIVERGED = 4
EXIT_MISSING = 5

LOG_COLUMNS = ("component", "epoch", "loss")

logger = logging.getLogger("memtl")


class MissingArtifact(Exception):
    pass


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return json.dumps(list(v))
    return str(v)


def write_table(path, rows: list[dict], columns=None) -> None:
    """Tab-separated table with a header row naming every column."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(columns or rows[0].keys())
        for row in rows:
            writer.writerow(_fmt(v) for v in row.values())


def _require(*paths) -> None:
    for p in paths:
        if p is None or not Path(p).exists():
            raise MissingArtifact(f"required input not found: {p}")


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        _require(args.config)
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _select(ds: Dataset, subset: str, test_fraction: float) -> Dataset:
    if subset == "all":
        return ds
    train, test = shift_split(ds, test_fraction)
    return train if subset == "train" else test


def _load_data(args, cfg: RunConfig) -> Dataset:
    path = args.data or cfg.paths.get("dataset")
    _require(path)
    return _select(Dataset.load(path), args.subset, cfg.test_fraction)


def label_report(ds: Dataset) -> dict:
    D = ds.D
    patterns = Counter("".join(map(str, row)) for row in D.tolist())
    attempts = ds.meta.get("attempts", len(ds))
    return {
        "samples": len(ds),
        "n_mts": ds.n,
        "resampled": ds.meta.get("resampled", 0),
        "infeasible_rate": ds.meta.get("resampled", 0) / attempts if attempts else 0.0,
        "offload_fraction": float(D.mean()),
        "decision_patterns": dict(sorted(patterns.items())),
    }


# -- commands -----------------------------------------------------------------


def cmd_init_config(args) -> int:
    RunConfig().save(args.out)
    print(f"wrote default config to {args.out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    count = cfg.count if args.count is None else args.count
    if count < 1:
        raise InvalidParameterError(f"--count must be >= 1, got {count}")
    ranges = cfg.sampling if args.n is None else cfg.sampling.with_n(args.n)
    ds = generate_dataset(ranges, count, cfg.seed, workers=args.workers)
    out = Path(args.out or cfg.paths.get("dataset") or "dataset.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    report = label_report(ds)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    print(f"wrote {len(ds)} samples (N={ds.n}) to {out}")
    print(f"offload fraction {report['offload_fraction']:.3f}, "
          f"infeasible rate {report['infeasible_rate']:.3f}, patterns {report['decision_patterns']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _load_data(args, cfg)
    if args.config and ds.n != cfg.sampling.n:
        raise InvalidParameterError(f"dataset has N={ds.n} but the config declares N={cfg.sampling.n}")
    out = Path(args.out or cfg.paths.get("model") or f"{args.kind}_bundle")
    m = cfg.m_heads if args.m is None else args.m
    log_rows: list[dict] = []
    try:
        if args.kind == "memtl":
            model, logs = train_memtl(ds, m, cfg.arch, cfg.train, cfg.seed)
            _log_rows(log_rows, "backbone", logs["backbone"])
            for i, log in enumerate(logs["heads"]):
                _log_rows(log_rows, f"head_{i:02d}", log)
        else:
            model, logs = train_mtfnn(ds, cfg.arch, cfg.train, cfg.seed)
            _log_rows(log_rows, "mtfnn", logs["mtfnn"])
    except TrainingDiverged as exc:
        # keep what was logged so far; the diverging component's epochs are tagged separately
        _log_rows(log_rows, "diverged", getattr(exc, "log", []))
        write_table(out / "training_log.tsv", log_rows, LOG_COLUMNS)
        raise
    size = model.save(out)
    write_table(out / "training_log.tsv", log_rows, LOG_COLUMNS)
    print(f"trained {args.kind} (N={model.n}, M={model.m}) on {len(ds)} samples; bundle {size} bytes at {out}")
    return EXIT_OK


def _log_rows(rows, component, log) -> None:
    rows.extend({"component": component, "epoch": i, "loss": v} for i, v in enumerate(log, start=1))


def _load_model(args, cfg) -> MemtlModel:
    path = args.model or cfg.paths.get("model")
    _require(path, Path(path) / "manifest.json" if path else None)
    return MemtlModel.load(path)


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = _load_model(args, cfg)
    ds = _load_data(args, cfg)
    row = evaluate(model, ds, args.selection, timing=not args.no_timing)
    data = {"subset": args.subset, "selection": args.selection, **row.__dict__}
    write_table(args.out, [data])
    print(f"{row.model} N={row.n_mts} M={row.m_heads} on {len(ds)} samples ({args.subset}): "
          f"mse {row.mse:.4f}, accuracy {row.accuracy:.3f}, per-MT accuracy {row.per_mt_accuracy:.3f}, "
          f"{row.inference_time_ms:.4f} ms/sample, {row.model_size / 1024:.1f} KB")
    return EXIT_OK


def cmd_decompose(args) -> int:
    cfg = _config(args)
    model = _load_model(args, cfg)
    ds = _load_data(args, cfg)
    rep = decompose(model, ds)
    rows = [
        {"head": i, "zeta": z, "chi_bar": c} for i, (z, c) in enumerate(zip(rep.per_head_zeta, rep.per_head_chi_bar))
    ]
    write_table(args.out, rows)
    summary = {k: v for k, v in rep.as_dict().items() if k not in ("per_head_zeta", "per_head_chi_bar")}
    write_table(Path(args.out).with_suffix(".summary.tsv"), [summary])
    print(f"mean head error {rep.zeta_bar:.6f} - mean ambiguity {rep.chi_bar:.6f} = "
          f"ensemble error {rep.ensemble_zeta:.6f} (residual {rep.residual:.2e}); "
          f"min-cost selection error {rep.cost_selected_zeta:.6f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    ns = args.ns or list(cfg.bench_ns)
    ms = args.ms or list(cfg.bench_ms)
    count = cfg.count if args.count is None else args.count
    cells = benchmark(cfg.sampling, ns, ms, count, cfg.test_fraction, cfg.arch, cfg.train, cfg.seed,
                      timing=not args.no_timing)
    out = Path(args.out)
    rows = []
    for cell in cells:
        base = cell.mtfnn
        for row in cell.memtl:
            rows.append({
                "n_mts": cell.n_mts, "m_heads": row.m_heads,
                "mtfnn_mse": base.mse, "mtfnn_accuracy": base.accuracy,
                "mtfnn_time_ms": base.inference_time_ms, "mtfnn_size": base.model_size,
                "memtl_mse": row.mse, "memtl_accuracy": row.accuracy,
                "memtl_time_ms": row.inference_time_ms, "memtl_size": row.model_size,
                "delta_mse": base.mse - row.mse, "delta_accuracy": row.accuracy - base.accuracy,
            })
    write_table(out / "table1.tsv", rows)
    psi = efficiency_table(cells)
    write_table(out / "table2.tsv", psi)
    print(f"{'N':>2} {'M':>2} {'MTFNN mse':>10} {'acc':>6} {'MEMTL mse':>10} {'acc':>6} {'psi':>8}")
    for r, p in zip(rows, psi):
        print(f"{r['n_mts']:>2} {r['m_heads']:>2} {r['mtfnn_mse']:>10.4f} {r['mtfnn_accuracy']:>6.3f} "
              f"{r['memtl_mse']:>10.4f} {r['memtl_accuracy']:>6.3f} {p['psi']:>8.4f}")
    return EXIT_OK


def cmd_converge(args) -> int:
    cfg = _config(args)
    ds = _load_data(args, cfg)
    seeds = args.seeds or list(cfg.converge_seeds)
    curves, summary = [], []
    for seed in seeds:
        res = convergence_compare(ds, cfg.arch, cfg.train, seed, cfg.threshold_factor)
        for epoch, (h, s) in enumerate(zip(res.head_only, res.from_scratch), start=1):
            curves.append({"seed": seed, "epoch": epoch, "head_only": h, "from_scratch": s})
        summary.append({"seed": seed, "threshold": res.threshold, "head_epochs": res.head_epochs,
                        "scratch_epochs": res.scratch_epochs, "ratio": res.ratio, "censored": res.censored,
                        "head_final": res.head_only[-1], "scratch_final": res.from_scratch[-1]})
    out = Path(args.out)
    write_table(out / "curves.tsv", curves)
    write_table(out / "summary.tsv", summary)
    ratios = [s["ratio"] for s in summary]
    print(f"median epochs-to-threshold ratio (head-only / from-scratch) over {len(seeds)} seeds: "
          f"{float(np.median(ratios)):.3f}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memtl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, model=False, subset="all"):
        p.add_argument("--config", help="JSON run config (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if data:
            p.add_argument("--data", help="dataset file (JSON lines)")
            p.add_argument("--subset", choices=("all", "train", "test"), default=subset,
                           help="use the whole dataset or one side of its drift split")
        if model:
            p.add_argument("--model", help="model bundle directory")

    p = sub.add_parser("init-config", help="write the default config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("gen-data", help="generate a labelled dataset")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--n", type=int, help="number of MTs (overrides sampling.n)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--report", help="generation report path (default: <out>.report.json)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model bundle")
    common(p, data=True)
    p.add_argument("--kind", choices=("mtfnn", "memtl"), required=True)
    p.add_argument("--m", type=int, help="number of heads (memtl)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a bundle")
    common(p, data=True, model=True)
    p.add_argument("--selection", choices=("cost", "mse"), default="cost")
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="MTFNN vs MEMTL over an N x M grid")
    common(p)
    p.add_argument("--ns", type=int, nargs="+")
    p.add_argument("--ms", type=int, nargs="+")
    p.add_argument("--count", type=int)
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("decompose", help="error-ambiguity decomposition")
    common(p, data=True, model=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("converge", help="head-only vs from-scratch convergence")
    common(p, data=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_converge)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except UnlabelableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNLABELABLE
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except InvalidParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
