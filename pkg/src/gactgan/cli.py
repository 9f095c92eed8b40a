"""Command line entry point: ``gactgan {train,synthesize,evaluate,sweep,schema}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure during training or sampling.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import SchemaError, infer_schema, save_schema
from .evaluate import MetricError, UtilitySpec
from . import experiment as ex

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gactgan", description="Tabular synthesis with a Bayesian (SWAG) CTGAN generator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one model per (loss, seed) in an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output root (default: the config's 'output')")

    s = sub.add_parser("synthesize", help="sample a synthetic table from a posterior or checkpoint")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--posterior")
    src.add_argument("--checkpoint", help="point-estimate (CTGAN baseline) sampling")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--batch", type=int, default=500)
    s.add_argument("--samples", type=int, default=1, help="posterior draws averaged per batch (S)")
    s.add_argument("--alpha", type=float, help="covariance scale (default: the stored value)")
    s.add_argument("--rank", type=int, help="use only the newest K deviation columns")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="score a directory of synthetic CSVs")
    e.add_argument("--original", required=True)
    e.add_argument("--synthetic", required=True, help="directory of CSVs with .json sidecars")
    e.add_argument("--spec", required=True, help="utility spec JSON")
    e.add_argument("--schema", help="schema JSON for typing columns")
    e.add_argument("--phi", type=float, default=0.75)
    e.add_argument("--out", required=True)
    e.add_argument("--no-svg", action="store_true")

    w = sub.add_parser("sweep", help="train, synthesize and evaluate a full grid")
    w.add_argument("--config", required=True)
    w.add_argument("--out")

    c = sub.add_parser("schema", help="infer a schema JSON from a CSV")
    c.add_argument("--csv", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--categorical", nargs="*", default=[], help="force these columns to be categorical")
    return p


def run(args) -> int:
    if args.command == "train":
        cfg = ex.ExperimentConfig.load(args.config)
        for path in ex.cmd_train(cfg, args.out):
            print(path)
    elif args.command == "synthesize":
        if args.n < 0 or args.batch < 1 or args.samples < 1:
            raise ex.ConfigError("--n must be >= 0, --batch and --samples >= 1")
        if args.alpha is not None and not 0 <= args.alpha <= 1:
            raise ex.ConfigError("--alpha must lie in [0, 1]")
        if args.checkpoint:
            ex.cmd_synthesize_baseline(args.checkpoint, args.n, args.batch, args.seed, args.out)
        else:
            ex.cmd_synthesize(args.posterior, args.n, args.batch, args.samples, args.alpha, args.seed, args.out, args.rank)
        print(args.out)
    elif args.command == "evaluate":
        if not 0 <= args.phi <= 1:
            raise ex.ConfigError("--phi must lie in [0, 1]")
        spec = UtilitySpec.from_dict(json.loads(Path(args.spec).read_text()))
        summary = ex.cmd_evaluate(args.original, args.synthetic, spec, args.phi, args.out, args.schema, not args.no_svg)
        for g in summary:
            m = g["means"]
            print(f"{g['config']:<40} U={m['U']:.4f} R={m['R']:.4f} SS={m['SS']:.4f} pareto={int(g['pareto'])}")
    elif args.command == "sweep":
        cfg = ex.ExperimentConfig.load(args.config)
        report = ex.cmd_sweep(cfg, args.out)
        print(json.dumps({"config_hash": report["config_hash"], "best": report["best"], "failed": len(report["failed"])}))
    elif args.command == "schema":
        schema = infer_schema(args.csv, {c: "categorical" for c in args.categorical})
        save_schema(schema, args.out)
        print(args.out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ex.ConfigError as exc:
        print(f"gactgan: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"gactgan: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SchemaError, MetricError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"gactgan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
