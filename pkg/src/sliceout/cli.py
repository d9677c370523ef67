"""Command-line front end: ``sliceout train|bench|verify|cost``.

Exit codes: 0 success, 1 failed check or training failure, 2 usage or config
error, 3 IO error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

from . import config as configmod
from . import verify
from .costmodel import CO2_MODES, co2_savings, table1_costs
from .data import gen_blobs, idx_dataset
from .errors import ConsistencyError, FormatError, SliceOutError, TrainingError
from .slicing import SCHEME_KINDS
from .trainer import BENCH_SCHEMES, bench_compare, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

METRICS_COLUMNS = ("epoch", "scheme", "p", "step_time_ms", "peak_activation_bytes", "copy_bytes",
                   "multiply_ops", "train_loss", "train_acc", "test_acc")

log = logging.getLogger("sliceout")


def _err(msg):
    print(f"sliceout: error: {msg}", file=sys.stderr)


def load_dataset(ds: configmod.DatasetConfig, base_dir="."):
    if ds.kind == "blobs":
        return gen_blobs(ds.classes, ds.dim, ds.n, ds.seed, ds.spread)

    def resolve(p):
        return None if p is None else os.path.join(base_dir, p)

    return idx_dataset(resolve(ds.images), resolve(ds.labels), resolve(ds.test_images), resolve(ds.test_labels),
                       seed=ds.seed)


def write_metrics(path, epochs):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_COLUMNS)
        for e in epochs:
            row = dataclasses.asdict(e)
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRICS_COLUMNS])


def cmd_train(args):
    try:
        cfg = configmod.load(args.config)
    except OSError as e:
        _err(f"cannot read config: {e}")
        return EXIT_IO
    except SliceOutError as e:
        _err(f"{args.config}: {e}")
        return EXIT_USAGE
    out_dir = args.output or cfg.output
    try:
        dataset = load_dataset(cfg.dataset, os.path.dirname(os.path.abspath(args.config)))
    except (OSError, FormatError, ConsistencyError) as e:
        _err(f"dataset: {e}")
        return EXIT_IO
    try:
        record = train(cfg.train_config(), dataset)
    except TrainingError as e:
        _err(str(e))
        return EXIT_FAIL
    except SliceOutError as e:
        _err(str(e))
        return EXIT_USAGE
    try:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics(os.path.join(out_dir, "metrics.csv"), record.epochs)
        summary = {
            "config": configmod.to_dict(cfg),
            "final": dataclasses.asdict(record.final),
            "epochs": [dataclasses.asdict(e) for e in record.epochs],
        }
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump(summary, f, indent=2)
    except OSError as e:
        _err(f"cannot write results: {e}")
        return EXIT_IO
    final = record.final
    print(f"final train_acc {final.train_acc:.4f} test_acc {final.test_acc:.4f}")
    return EXIT_OK


def cmd_bench(args):
    schemes = tuple(s.strip() for s in args.schemes.split(",") if s.strip())
    unknown = [s for s in schemes if s not in SCHEME_KINDS]
    if unknown:
        _err(f"unknown scheme(s) {', '.join(unknown)}; expected from {', '.join(SCHEME_KINDS)}")
        return EXIT_USAGE
    try:
        rows = bench_compare(args.model, args.width, args.batch, args.p, schemes, args.trials, args.steps,
                             args.warmup, args.depth, precision=args.precision, seed=args.seed)
    except (SliceOutError, ValueError) as e:
        _err(str(e))
        return EXIT_USAGE
    header = f"{'scheme':<12}{'step ms':>10}{'time %':>9}{'act bytes':>14}{'memory %':>10}{'copy bytes':>13}"
    print(header)
    for r in rows:
        print(f"{r.scheme:<12}{r.step_time_ms:>10.2f}{r.rel_time_pct:>9.1f}{r.peak_activation_bytes:>14d}"
              f"{r.rel_memory_pct:>10.1f}{r.copy_bytes:>13d}")
    if args.output:
        try:
            with open(args.output, "w", newline="") as f:
                w = csv.writer(f)
                fields = [fld.name for fld in dataclasses.fields(rows[0])]
                w.writerow(fields)
                for r in rows:
                    w.writerow([getattr(r, k) for k in fields])
        except OSError as e:
            _err(f"cannot write {args.output}: {e}")
            return EXIT_IO
    return EXIT_OK


def cmd_verify(args):
    outcomes = verify.run_suite(args.suite)
    failed = 0
    for o in outcomes:
        print(f"{'PASS' if o.passed else 'FAIL'}  {o.name}: {o.detail}")
        failed += not o.passed
    print(f"{len(outcomes) - failed}/{len(outcomes)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_cost(args):
    try:
        report = table1_costs(args.scheme, args.b, args.n, args.m, args.p)
        savings = None
        if args.co2:
            savings = co2_savings(args.co2, args.speedup, args.memory_gain, args.pool)
    except (SliceOutError, ValueError) as e:
        _err(str(e))
        return EXIT_USAGE
    if args.json:
        out = report.as_dict()
        if savings is not None:
            out["co2_mode"], out["co2_savings"] = args.co2, savings
        print(json.dumps(out))
        return EXIT_OK
    for k, v in report.as_dict().items():
        print(f"{k}: {v}")
    if savings is not None:
        print(f"co2 savings ({args.co2}): {savings:.4g}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="sliceout", description="SliceOut training, benchmarks and checks.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("config")
    t.add_argument("--output", help="results directory (overrides the config's output)")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="compare step time and activation memory across schemes")
    b.add_argument("--model", default="mlp", choices=("mlp", "resblock", "attention"))
    b.add_argument("--width", type=int, default=2048)
    b.add_argument("--depth", type=int, default=3)
    b.add_argument("--batch", type=int, default=256)
    b.add_argument("--p", type=float, default=0.5)
    b.add_argument("--schemes", default=",".join(BENCH_SCHEMES), help="comma-separated scheme names")
    b.add_argument("--trials", type=int, default=3)
    b.add_argument("--steps", type=int, default=5)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--precision", default="f32", choices=("f32", "f64"))
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--output", help="also write the table as CSV")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="run the moment, gradient and count checks")
    v.add_argument("--suite", default="all", choices=("moments", "grads", "counts", "all"))
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("cost", help="closed-form per-layer costs and CO2 savings")
    c.add_argument("--scheme", required=True, choices=SCHEME_KINDS)
    c.add_argument("--b", type=int, required=True)
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--m", type=int, required=True)
    c.add_argument("--p", type=float, required=True)
    c.add_argument("--co2", choices=CO2_MODES)
    c.add_argument("--speedup", type=float, default=0.0)
    c.add_argument("--memory-gain", type=float, default=0.0)
    c.add_argument("--pool", type=int, default=4)
    c.add_argument("--json", action="store_true", help="print the report as one JSON object")
    c.set_defaults(func=cmd_cost)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
