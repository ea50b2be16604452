"""``hiertask`` command-line interface."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import SweepSpec, load_config, load_sweep, load_toml
from .data import (
    SyntheticSpec,
    as_arrays,
    generate_synthetic,
    load_manifest,
    write_manifest,
    write_taxonomy,
)
from .errors import HiertaskError
from .harness import emit_plots, report_accounting, rows_to_csv, run_point, run_sweep
from .metrics import evaluate
from .mtl import load_checkpoint
from .training import predict_logits

DEFAULT_OUT = "hiertask_out"


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get("HIERTASK_OUT") or DEFAULT_OUT)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    row = run_point(cfg, out)
    (out / "results.csv").write_text(rows_to_csv([row]), encoding="utf-8")
    print(json.dumps(row, indent=2))
    return 0


def cmd_sweep(args) -> int:
    spec = load_sweep(args.config)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seeds=(args.seed,))
    result = run_sweep(spec, _out_dir(args), jobs=args.jobs)
    print(f"{len(result.rows)} runs written to {result.results_csv}")
    for run_id, err in result.failures:
        print(f"FAILED {run_id}: {err}", file=sys.stderr)
    return 0 if result.ok else 1


def cmd_eval(args) -> int:
    taxonomy, samples = load_manifest(args.manifest)
    net = load_checkpoint(args.checkpoint, taxonomy)
    x, y_model, y_make = as_arrays(samples)
    model_logits, make_logits = predict_logits(net, x)
    report = evaluate(model_logits, y_model, y_make, taxonomy, make_logits)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out) if args.out else Path(args.results).parent
    for path in emit_plots(args.results, out, metric=args.metric):
        print(path)
    return 0


def cmd_accounting(args) -> int:
    report = report_accounting(
        args.d, args.k, args.m,
        expect_parallel=args.expect_parallel, expect_cascaded=args.expect_cascaded,
        expect_parallel_flops=args.expect_parallel_flops,
        expect_cascaded_flops=args.expect_cascaded_flops,
    )
    sys.stdout.write(report.render())
    return 0 if report.ok else 1


def cmd_synth(args) -> int:
    fields = {}
    if args.config:
        table = load_toml(args.config)
        fields.update(table.get("synthetic", table.get("dataset", {}).get("synthetic", table)))
    overrides = {
        "num_makes": args.makes, "models_per_make": args.models_per_make, "dim": args.dim,
        "n_per_model": args.n_per_model, "make_separation": args.make_separation,
        "model_separation": args.model_separation, "noise_sigma": args.noise_sigma,
        "seed": args.seed,
    }
    fields.update({k: v for k, v in overrides.items() if v is not None})
    spec = SyntheticSpec(**fields)
    taxonomy, samples = generate_synthetic(spec)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.csv", taxonomy, samples, inline=not args.vector_files)
    write_taxonomy(out / "taxonomy.csv", taxonomy)
    print(f"{len(samples)} samples, {taxonomy.num_makes} makes, {taxonomy.num_models} models -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiertask", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch records")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a sweep file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="replace the seed axis by this single seed")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render SVG bar charts from a results CSV")
    p.add_argument("results")
    p.add_argument("--metric", default="model_acc")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("accounting", help="head parameter / FLOP deltas")
    p.add_argument("d", type=int)
    p.add_argument("k", type=int)
    p.add_argument("m", type=int)
    p.add_argument("--expect-parallel", type=int)
    p.add_argument("--expect-cascaded", type=int)
    p.add_argument("--expect-parallel-flops", type=int)
    p.add_argument("--expect-cascaded-flops", type=int)
    p.set_defaults(func=cmd_accounting)

    p = sub.add_parser("synth", help="write a synthetic hierarchical manifest")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--makes", type=int)
    p.add_argument("--models-per-make", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--n-per-model", type=int)
    p.add_argument("--make-separation", type=float)
    p.add_argument("--model-separation", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--vector-files", action="store_true", help="one .f64 file per sample")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (HiertaskError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
