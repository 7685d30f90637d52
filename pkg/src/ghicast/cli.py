"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import pipeline
from .errors import ConfigError, GhicastError

logger = logging.getLogger("ghicast")

COMMANDS = {
    "ingest": "load and clean the hourly data",
    "select": "compare variable-selection methods and pick covariates",
    "fit": "fit every roster model on the training window",
    "forecast": "rolling block forecasts over the test window",
    "combine": "quantile combination of the base forecasts",
    "score": "score the individual forecasts",
    "murphy": "Murphy diagram and density figures",
    "run": "the whole pipeline",
    "report": "write summary.md for an output directory",
}


def _common(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="JSON configuration file")
    parser.add_argument("--seed", type=int, default=d, help="random seed (overrides the config)")
    parser.add_argument("--out", default=d, help="output directory (overrides the config)")
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ghicast", description="Probabilistic GHI forecasting workbench")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        _common(p, suppress=True)
        if name == "ingest":
            p.add_argument("--input", help="CSV file to ingest (overrides data.path)")
            p.add_argument("--url", help="remote CSV export (overrides data.url)")
        if name == "murphy":
            p.add_argument("--tau", type=float, help="quantile level of the Murphy diagram")
        if name == "score":
            p.add_argument("--gamma-mode", choices=("forecast", "unshifted", "predictive"))
    return parser


def load_config(args) -> pipeline.PipelineConfig:
    doc = {}
    if args.config:
        doc = pipeline.PipelineConfig.load(args.config).to_dict()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        doc["seed"] = args.seed
    if args.out:
        doc["output"] = args.out
    data = dict(doc.get("data", {}))
    if getattr(args, "input", None):
        data.update(path=args.input, url=None)
    if getattr(args, "url", None):
        data.update(url=args.url, path=None)
    if data:
        doc["data"] = data
    scoring = dict(doc.get("scoring", {}))
    if getattr(args, "tau", None) is not None:
        scoring["murphy_tau"] = args.tau
    if getattr(args, "gamma_mode", None):
        scoring["gamma_mode"] = args.gamma_mode
    if scoring:
        doc["scoring"] = scoring
    return pipeline.PipelineConfig.from_dict(doc)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "run":
            ws = pipeline.run(cfg)
            print(f"outputs written to {ws.root}")
        else:
            out = pipeline.run_stage(args.command, cfg)
            if args.command == "report":
                print(out)
        return 0
    except GhicastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
