"""Command-line entry point: dataset generation, single runs, sweeps and reports.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .data import DEFAULT_VOLUNTEERS, SPLITS, build_dataset, ingest_external, load_dataset, save_dataset
from .errors import ConfigError, EtvaeError
from .experiment import ExperimentGrid, render_report, run_experiment, write_atomic
from .trainer import REGIMES, TrainConfig, run_regime

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _split_sizes(text):
    try:
        sizes = json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not valid JSON: {exc}")
    if not isinstance(sizes, dict) or set(sizes) - set(SPLITS):
        raise argparse.ArgumentTypeError(f"expected an object with keys from {SPLITS}")
    return sizes


def build_parser() -> Parser:
    p = Parser(prog="etvae", description="Semi-supervised rotation-equivariant VAE for galaxy vote fractions.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-data", help="render a synthetic galaxy corpus")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--n-per-class", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--volunteers", type=int, default=DEFAULT_VOLUNTEERS)
    g.add_argument("--split-sizes", type=_split_sizes, default=None,
                   help='per-class split sizes as JSON, e.g. {"train-labelled": 400, "test": 134}; '
                        "overrides --n-per-class")

    t = sub.add_parser("train", help="train one regime and write its RunReport")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--regime", required=True, choices=REGIMES)
    t.add_argument("--labels", type=int, default=100)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--checkpoint", type=Path, default=None,
                   help="pretrained VAE weights (two-step: reused or written; m1: required)")
    t.add_argument("--config", type=Path, default=None, help="JSON file of TrainConfig overrides")

    s = sub.add_parser("sweep", help="run a regime x label-budget x seed grid (resumable)")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--grid", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)

    r = sub.add_parser("report", help="render results.json as a markdown table")
    r.add_argument("--results", required=True, type=Path)

    i = sub.add_parser("ingest", help="convert a folder of images plus a votes CSV into a dataset")
    i.add_argument("--images", required=True, type=Path)
    i.add_argument("--votes", required=True, type=Path)
    i.add_argument("--size", type=int, default=64)
    i.add_argument("--out", required=True, type=Path)
    return p


def cmd_gen_data(args) -> None:
    ds = build_dataset(args.n_per_class, S=args.size, n_volunteers=args.volunteers, seed=args.seed,
                       split_sizes=args.split_sizes)
    out = save_dataset(ds, args.out)
    sizes = ", ".join(f"{k} {v}" for k, v in ds.split_sizes().items())
    print(f"wrote {len(ds.images)} images to {out} ({sizes})")


def cmd_train(args) -> None:
    overrides = {}
    if args.config is not None:
        try:
            overrides = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(overrides, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
    overrides.update(regime=args.regime, labelled_count=args.labels, seed=args.seed)
    if args.steps is not None:
        overrides["steps"] = args.steps
    cfg = TrainConfig.from_dict(overrides)
    data = load_dataset(args.data)
    t0 = time.perf_counter()
    report = run_regime(cfg, data, args.checkpoint)
    write_atomic(args.out, report.to_json())
    print(f"{args.regime}: test RMSE {report.final_rmse:.4f}, best validation step {report.best_step}, "
          f"{time.perf_counter() - t0:.1f} s", file=sys.stderr)


def cmd_sweep(args) -> None:
    grid = ExperimentGrid.load(args.grid)
    data = load_dataset(args.data)
    sys.stdout.write(run_experiment(grid, data, args.out))


def cmd_report(args) -> None:
    sys.stdout.write(render_report(args.results))


def cmd_ingest(args) -> None:
    ds = ingest_external(args.images, args.votes, S=args.size)
    out = save_dataset(ds, args.out)
    print(f"wrote {len(ds.images)} images to {out}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sweep": cmd_sweep, "report": cmd_report,
            "ingest": cmd_ingest}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EtvaeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
