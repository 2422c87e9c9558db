"""Command line entry point: ``gen-data``, ``run`` and ``report``.

Exit codes: 0 success, 2 configuration error, 3 runtime contract error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .data import generate_synthetic
from .engine import DISTILL_MODES
from .errors import ConfigError, S2ILError
from .runner import format_report, read_manifest, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONTRACT = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2il", description="Class-incremental learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = parser.add_subparsers(dest="verb", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset file")
    gen.add_argument("--config", help="experiment config; its data.* keys set the generator")
    gen.add_argument("--seed", type=int, help="generator seed (overrides data.seed)")
    gen.add_argument("--out", required=True, help="output dataset file")

    run = sub.add_parser("run", help="run the configured sweep")
    run.add_argument("--config", help="experiment config file (defaults apply when omitted)")
    run.add_argument("--seed", type=int, help="run this single seed instead of the configured ones")
    run.add_argument("--out", help="output directory (overrides output.dir)")
    run.add_argument("--mode", choices=DISTILL_MODES, help="run only this distillation mode")
    run.add_argument("--oracle", action="store_true", help="also run the full-data oracle reference")

    rep = sub.add_parser("report", help="print the aggregated metrics of a finished run")
    rep.add_argument("--out", required=True, help="run output directory")
    return parser


def _config(path: str | None) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    sweep = cfg.sweep
    if args.mode is not None:
        sweep = dataclasses.replace(sweep, modes=[args.mode])
    if args.oracle:
        sweep = dataclasses.replace(sweep, include_oracle=True)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    output = dataclasses.replace(cfg.output, dir=args.out) if args.out else cfg.output
    return dataclasses.replace(cfg, sweep=sweep, seeds=seeds, output=output)


def _gen_data(args) -> int:
    d = _config(args.config).data
    seed = args.seed if args.seed is not None else d.seed
    ds = generate_synthetic(d.classes, d.per_class, d.image_size, seed, d.channels, path=args.out,
                            noise=d.noise, blob_gain=d.blob_gain)
    print(f"wrote {len(ds)} samples ({int((~ds.is_test).sum())} train, {int(ds.is_test.sum())} test) to {args.out}")
    return EXIT_OK


def _run(args) -> int:
    cfg = _apply_overrides(_config(args.config), args)
    manifest = run_experiment(cfg)
    print(format_report(manifest))
    print(f"reports written to {Path(cfg.output.dir).resolve()}")
    return EXIT_OK


def _report(args) -> int:
    print(format_report(read_manifest(args.out)))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"gen-data": _gen_data, "run": _run, "report": _report}[args.verb]
    try:
        return handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except S2ILError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
