"""Command line: ``parabolax <experiment> --config <path> [options]``.

Exit status: 0 on success, 1 on configuration errors, 2 on numerical
failure.  Failures leave ``error.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import EXPERIMENTS, RunConfig, load_config
from .errors import ConfigError, NumericalFailure
from .pipelines import run_pipeline
from .reports import error_report, report_bundle

log = logging.getLogger("parabolax")

LOG_ENV = "PARABOLAX_LOG_LEVEL"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run(config: RunConfig, out_dir: str | Path | None = None) -> int:
    """Execute the configured pipeline and write the report bundle."""
    out = Path(out_dir or config.output["dir"])
    resolved = config.resolved()
    try:
        result = run_pipeline(config)
        report_bundle(result, resolved, out)
    except (ConfigError, ValueError) as exc:
        error_report(out, exc, EXIT_CONFIG, resolved)
        log.error("%s", exc)
        return EXIT_CONFIG
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        error_report(out, exc, EXIT_NUMERICAL, resolved)
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERICAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parabolax", description="Reaction-diffusion numerical laboratory.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed for randomized probes")
    p.add_argument("--resolution", type=int, help="nodes per axis")
    p.add_argument("--dt", type=float, help="time step")
    return p


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, experiment=args.experiment, seed=args.seed,
                          resolution=args.resolution, dt=args.dt, out=args.out)
    except ConfigError as exc:
        error_report(Path(args.out or "parabolax-out"), exc, EXIT_CONFIG)
        print(f"parabolax: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code = run(cfg)
    if code:
        print(f"parabolax: {args.experiment} failed (exit {code}); see {Path(cfg.output['dir']) / 'error.json'}",
              file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
