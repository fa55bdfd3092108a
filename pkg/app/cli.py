"""Command line entry point: ``sao <kind> [flags]`` and ``sao selftest``."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from app.errors import ConfigError
from app.harness import HarnessService
from app.models import ExperimentConfig, ExperimentKind

logger = logging.getLogger(__name__)

EXIT_PASSED = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

FLAG_FIELDS = [
    "beta",
    "a",
    "T",
    "replicas",
    "n",
    "epsilon",
    "dt",
    "tol",
    "seed",
    "out",
    "workers",
    "k_max",
    "betas",
    "alpha",
    "record",
    "N",
    "ensemble_samples",
    "cells",
    "theta",
    "nu",
    "b",
    "n_paths",
    "x_max",
]


def _flags() -> argparse.ArgumentParser:
    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--beta", type=float, help="inverse temperature")
    flags.add_argument("--a", type=float, help="spectral parameter of the homogeneous diffusion")
    flags.add_argument("--T", type=float, help="horizon (units of m(a) for mckean and poisson)")
    flags.add_argument("--replicas", type=int)
    flags.add_argument("--n", type=int, help="depth of the exponential-quantile grid")
    flags.add_argument("--epsilon", type=float, help="spacing of the r-grid")
    flags.add_argument("--dt", type=float)
    flags.add_argument("--tol", type=float)
    flags.add_argument("--seed", type=int)
    flags.add_argument("--out", help="report path (JSON)")
    flags.add_argument("--workers", type=int)
    flags.add_argument("--k-max", dest="k_max", type=int)
    flags.add_argument("--betas", type=float, nargs="+", help="beta sweep for trend experiments")
    flags.add_argument("--alpha", type=float, help="significance level")
    flags.add_argument("--N", type=int, help="matrix size of the discrete beta-ensemble")
    flags.add_argument("--ensemble-samples", dest="ensemble_samples", type=int, help="matrices drawn in total")
    flags.add_argument("--cells", type=int, help="number of r-cells of the Poisson test")
    flags.add_argument("--theta", type=float, help="OU mean-reversion rate")
    flags.add_argument("--nu", type=float, help="OU noise scale")
    flags.add_argument("--b", type=float, help="OU exit level")
    flags.add_argument("--n-paths", dest="n_paths", type=int, help="Monte Carlo paths of the OU exit check")
    flags.add_argument("--x-max", dest="x_max", type=float, help="upper end of the OU exit x-grid")
    flags.add_argument("--record", action="store_true", default=None, help="record the run in the registry")
    flags.add_argument("--config", type=Path, help="JSON file of ExperimentConfig fields")
    flags.add_argument("--verbose", action="store_true")
    return flags


def build_parser() -> argparse.ArgumentParser:
    flags = _flags()
    parser = argparse.ArgumentParser(prog="sao", description="Stochastic Airy operator experiments")
    commands = parser.add_subparsers(dest="command", required=True)
    for kind in ExperimentKind:
        commands.add_parser(kind.value, parents=[flags], help=f"run the {kind.value} experiment")
    commands.add_parser("selftest", parents=[flags], help="deterministic checks against closed forms")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Flags over the JSON config file over field defaults."""
    settings: Dict[str, Any] = {}
    if args.config is not None:
        try:
            settings.update(json.loads(args.config.read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {args.config}: {e}") from e
    settings.update({name: getattr(args, name) for name in FLAG_FIELDS if getattr(args, name) is not None})
    settings["kind"] = args.command
    try:
        return ExperimentConfig.model_validate(settings)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    logging.getLogger("sqlalchemy.engine.Engine").setLevel(logging.WARNING)

    if args.command == "selftest":
        verdicts = HarnessService.selftest()
        rows = [
            (v.name, f"{v.statistic:.3g}" if v.statistic is not None else "-", "PASS" if v.passed else "FAIL")
            for v in verdicts
        ]
        sys.stdout.write(HarnessService.render_table(rows) + "\n")
        return EXIT_PASSED if all(v.passed for v in verdicts) else EXIT_FAILED

    try:
        config = load_config(args)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_USAGE

    report = HarnessService.run(config)
    sys.stdout.write(HarnessService.report_summary(report) + "\n")
    logger.info(f"{config.kind.value} finished in {report.wall_time:.1f}s: {'passed' if report.passed else 'failed'}")
    return EXIT_PASSED if report.passed else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
