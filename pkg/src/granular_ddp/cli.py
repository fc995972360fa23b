"""Command line entry point: ``granular-ddp <stage> --config cfg.json --out run/``.

Exit codes: 0 success, 1 missing artifact from an earlier stage,
2 configuration error, 3 numeric failure or simulator divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline
from .config import default_config, load_config, save_config
from .exceptions import ConfigurationError, NumericError, SimulationDivergence

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

STAGES = {
    "gen-data": pipeline.gen_data,
    "fit-pca": pipeline.fit_pca,
    "train": pipeline.train_stage,
    "optimize": pipeline.optimize_stage,
    "validate": pipeline.validate_stage,
    "report": pipeline.report,
    "run": pipeline.run_all,
}


def _parser():
    p = argparse.ArgumentParser(prog="granular-ddp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment JSON; defaults to OUT/config.json, then built-in defaults")
        s.add_argument("--out", required=True, help="run directory")
        s.add_argument("-v", "--verbose", action="store_true")
    d = sub.add_parser("default-config", help="print the default configuration")
    d.add_argument("--out", help="write to this file instead of stdout")
    return p


def _resolve_config(args):
    if args.config:
        return load_config(args.config)
    stored = os.path.join(args.out, "config.json")
    if os.path.exists(stored):
        return load_config(stored)
    return default_config()


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.stage == "default-config":
        if args.out:
            save_config(default_config(), args.out)
        else:
            json.dump(default_config(), sys.stdout, indent=2, sort_keys=True)
            print()
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        os.makedirs(args.out, exist_ok=True)
        if args.stage != "run":
            save_config(cfg, os.path.join(args.out, "config.json"))
        result = STAGES[args.stage](cfg, args.out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationDivergence, NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    if args.stage in ("report", "run"):
        json.dump(result, sys.stdout, indent=2, sort_keys=True)
        print()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
