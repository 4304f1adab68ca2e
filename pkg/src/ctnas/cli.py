"""Command-line entry point: ``ctnas search|retrain|eval|stats|ablate|synth``.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from typing import List, Optional

from .config import ConfigError, load_config, parse_value
from .supernet import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

log = logging.getLogger("ctnas")

# flag -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "out": "output_dir",
    "data": "data.source",
    "format": "data.format",
    "split": "data.split",
    "subject": "data.subject",
    "snr_db": "data.synth.snr_db",
    "trials_per_class": "data.synth.trials_per_class",
    "search_fraction": "data.search_fraction",
    "space": "space",
    "pairs": "arch.n_pairs",
    "nodes": "arch.n_nodes",
    "channels": "arch.channels",
    "classes": "arch.classes",
    "epochs": "search.epochs",
    "batch_size": "search.batch_size",
    "patience": "search.patience",
    "retrain_epochs": "retrain.epochs",
    "lambda1": "constraints.lambda1",
    "lambda2": "constraints.lambda2",
    "lambda3": "constraints.lambda3",
    "c_low": "constraints.c_low",
    "c_high": "constraints.c_high",
    "beta": "constraints.beta",
    "temperature": "constraints.temperature",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key by dotted path, e.g. search.w_lr=0.02")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="'synth' or a trial directory / CSV file")
    p.add_argument("--format", choices=["dir", "csv"])
    p.add_argument("--split", choices=["mixed", "subject_specific", "leave_ratio"])
    p.add_argument("--subject")
    p.add_argument("--snr-db", dest="snr_db", type=float)
    p.add_argument("--trials-per-class", dest="trials_per_class", type=int)
    p.add_argument("--search-fraction", dest="search_fraction", type=float)
    p.add_argument("--space", help="'desk', 'full', or a comma-separated operator list")
    p.add_argument("--pairs", type=int)
    p.add_argument("--nodes", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--retrain-epochs", dest="retrain_epochs", type=int)
    for name in ("lambda1", "lambda2", "lambda3", "beta", "temperature"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--c-low", dest="c_low", type=parse_value)
    p.add_argument("--c-high", dest="c_high", type=parse_value)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctnas", description="Constrained architecture search for EEG trials")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the constrained search and derive a genotype")
    _common(p)

    p = sub.add_parser("retrain", help="train a genotype from scratch and evaluate it")
    _common(p)
    p.add_argument("--genotype", required=True)

    p = sub.add_parser("eval", help="evaluate trained weights on the held-out split")
    _common(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--weights", required=True)

    p = sub.add_parser("stats", help="aggregate operator statistics over search runs")
    _common(p)
    p.add_argument("runs", nargs="+", help="search output directories")
    p.add_argument("--threshold", type=float)
    p.add_argument("--threshold-mode", dest="threshold_mode", choices=["relative", "absolute"])
    p.add_argument("--best-scope", dest="best_scope", choices=["global", "per_run"])

    p = sub.add_parser("ablate", help="run a grid over one ablation axis")
    _common(p)
    p.add_argument("--axis", required=True, choices=["nodes", "batch", "scale_constraint", "sparsity"])
    p.add_argument("--grid", default="", help="comma-separated settings (on,off for constraint axes)")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--no-retrain", dest="retrain", action="store_false")

    p = sub.add_parser("synth", help="write a synthetic trial set")
    _common(p)
    p.add_argument("--output", required=True, help="destination directory (dir) or file (csv)")
    p.add_argument("--out-format", dest="out_format", choices=["dir", "csv"], default="dir")
    return parser


def resolve_config(args) -> dict:
    overrides = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides.append((key.strip(), parse_value(value)))
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "space" and value not in ("desk", "full"):
            value = [v.strip() for v in value.split(",") if v.strip()]
        overrides.append((key, value))
    if getattr(args, "channels", None) is not None:
        overrides.append(("data.synth.channels", args.channels))
    if getattr(args, "classes", None) is not None:
        overrides.append(("data.synth.classes", args.classes))
    for flag in ("threshold", "threshold_mode", "best_scope"):
        if getattr(args, flag, None) is not None:
            overrides.append((f"stats.{flag}", getattr(args, flag)))
    return load_config(args.config, overrides)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _write_divergence(cfg: Optional[dict], exc: Exception) -> None:
    snapshot = getattr(exc, "snapshot", None)
    if cfg is None or snapshot is None:
        return
    os.makedirs(cfg["output_dir"], exist_ok=True)
    with open(os.path.join(cfg["output_dir"], "divergence.json"), "w") as fh:
        json.dump(snapshot, fh, indent=2)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from . import experiment as X

    cfg = None
    try:
        cfg = resolve_config(args)
        if args.command == "search":
            _print(asdict(X.cmd_search(cfg)))
        elif args.command == "retrain":
            _print(asdict(X.cmd_retrain(cfg, args.genotype)))
        elif args.command == "eval":
            _print(asdict(X.cmd_eval(cfg, args.genotype, args.weights)))
        elif args.command == "stats":
            st = cfg["stats"]
            out = args.out or os.path.join(cfg["output_dir"], "stats")
            _print(X.cmd_stats(args.runs, out, st["threshold"], st["threshold_mode"], st["best_scope"]))
        elif args.command == "ablate":
            grid = [g.strip() for g in args.grid.split(",") if g.strip()]
            try:
                seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            except ValueError:
                raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
            if args.axis in ("nodes", "batch"):
                if not grid:
                    raise ConfigError(f"--grid is required for the {args.axis} axis")
                try:
                    grid = [int(g) for g in grid]
                except ValueError:
                    raise ConfigError("--grid values must be integers for this axis") from None
            _print(X.cmd_ablate(cfg, args.axis, grid, seeds, args.retrain))
        elif args.command == "synth":
            trials = X.cmd_synth(cfg, args.output, args.out_format)
            _print({"output": args.output, "trials": len(trials), "channels": trials.n_channels,
                    "points": trials.n_points})
    except ConfigError as exc:
        print(f"ctnas: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        _write_divergence(cfg, exc)
        print(f"ctnas: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
