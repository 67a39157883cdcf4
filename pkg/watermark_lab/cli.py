"""
Command-line entry point.

    watermark-lab generate --config CONFIG [--seed N] [--out DIR] [--trials N] [--fixed-key]
    watermark-lab attack   --config CONFIG [--seed N] [--out DIR] [--trials N] [--trace]
    watermark-lab theory   --config CONFIG [--seed N] [--out DIR]
    watermark-lab validate --config CONFIG [--seed N] [--out DIR] [--trials N]
    watermark-lab plotdata RECORD [RECORD ...] --out DIR

Exit codes: 0 success or PASS, 1 validation FAIL, 2 usage or configuration
error, 3 a stage failed or an internal error occurred.
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import Settings, apply_overrides, get_settings, inline_config, load_experiment_config
from .errors import ConfigurationError, EnumerationCapError, LabError
from .services.experiment_service import ExperimentService
from .services.record_store import RecordStore

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ERROR = 3

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _seed(value: str) -> int:
    seed = int(value)
    if not 0 <= seed < (1 << 64):
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {value}")
    return seed


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def build_parser(settings: Settings) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=settings.log_level, help="Logging level (default: %(default)s)")
    common.add_argument("--out", type=Path, default=None, help="Output directory")

    experiment = argparse.ArgumentParser(add_help=False, parents=[common])
    experiment.add_argument("--config", type=Path, default=None, help="YAML experiment config")
    experiment.add_argument("--seed", type=_seed, default=None, help="Master seed (overrides the config)")
    experiment.add_argument("--trials", type=_positive, default=None, help="Trial count (overrides the config)")
    experiment.add_argument("--trace", action="store_true", default=None, help="Record per-step attack traces")
    experiment.add_argument(
        "--fixed-key", action="store_true", default=None, help="Reuse one key for every trial"
    )

    parser = argparse.ArgumentParser(
        prog="watermark-lab",
        description="Watermark erasure experiments on enumerable toy models",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser(
        "generate", parents=[experiment], help="Watermarked samples and detection statistics"
    )
    commands.add_parser("attack", parents=[experiment], help="Generate, then run the erasure attack")
    commands.add_parser("theory", parents=[experiment], help="Spectral report over a quality-floor sweep")
    commands.add_parser("validate", parents=[experiment], help="Check the attack-success guarantee (PASS/FAIL)")
    plot = commands.add_parser("plotdata", parents=[common], help="Tidy CSVs from traced attack records")
    plot.add_argument("records", nargs="*", type=Path, help="record.json files or run directories")
    return parser


def _run_experiment(args: argparse.Namespace, settings: Settings) -> int:
    if args.config is not None:
        config, config_hash, raw = load_experiment_config(args.config)
    else:
        logger.info("No --config given; using the default experiment")
        config, config_hash, raw = inline_config({})

    seed = args.seed
    if seed is None and "seed" not in config.model_fields_set:
        seed = settings.default_seed
    config = apply_overrides(
        config, seed=seed, trials=args.trials, trace=args.trace, fixed_key=args.fixed_key
    )
    out_dir = args.out or config.output_dir or Path(settings.output_dir) / args.command

    service = ExperimentService(settings)
    result = asyncio.run(service.run(args.command, config, config_hash, raw, out_dir))
    print(result.message)
    print(f"artifacts: {result.out_dir}")
    return result.exit_code


def _run_plotdata(args: argparse.Namespace, settings: Settings) -> int:
    if args.out is None:
        raise ConfigurationError("plotdata needs --out")
    records = [RecordStore.load_record(path) for path in args.records]
    paths = ExperimentService(settings).plot_data(records, args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code."""
    settings = get_settings()
    parser = build_parser(settings)
    args = parser.parse_args(argv)

    logging.basicConfig(level=args.log_level.upper(), format=LOG_FORMAT)

    try:
        if args.command == "plotdata":
            return _run_plotdata(args, settings)
        return _run_experiment(args, settings)
    except (ConfigurationError, EnumerationCapError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except LabError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
