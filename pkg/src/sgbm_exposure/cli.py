"""Command-line interface for SGBM Exposure."""

import argparse
import sys
from pathlib import Path

from sgbm_exposure import __version__
from sgbm_exposure.config import RunConfig
from sgbm_exposure.exceptions import (
    ConfigurationError,
    ReportError,
    SgbmExposureError,
)
from sgbm_exposure.logger import LOG_LEVELS, setup_logger
from sgbm_exposure.runner import (
    compare,
    dump_bundles,
    implied_vols,
    preset_table,
    read_report,
    run,
    validate_moments,
    write_json,
)

logger = setup_logger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 3

DEFAULT_STRIKES = (40.0, 80.0, 100.0, 120.0, 180.0)


def _add_source_arguments(parser: argparse.ArgumentParser) -> None:
    """Options shared by every command that builds a RunConfig."""
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", type=Path, help="Path to a YAML run configuration")
    source.add_argument("--preset", type=str, help="Named parameter set (see preset-list)")
    parser.add_argument(
        "--env-file",
        type=Path,
        help="Path to .env file (default: .env in current directory)",
    )
    parser.add_argument(
        "--output-dir",
        type=Path,
        help="Directory for result files (overrides config and environment)",
    )
    parser.add_argument("--paths", type=int, help="Regression-pass path count N")
    parser.add_argument("--seeds", type=int, nargs="+", help="Seeds, one repetition each")
    parser.add_argument("--workers", type=int, help="Simulation threads per seed")
    parser.add_argument("--order", type=int, help="Basis order p")
    parser.add_argument(
        "--method", choices=["bifurcation", "equal_number"], help="Bundling method"
    )
    parser.add_argument("--iterations", type=int, help="Recursive-bifurcation levels")
    parser.add_argument("--splits", type=int, nargs="+", help="Equal-number group counts")
    parser.add_argument(
        "--moment-backend", choices=["auto", "closed", "generic"], help="Discounted-moment backend"
    )
    parser.add_argument(
        "--sqrt-variance-table",
        action="store_true",
        help="Interpolate the HHW sqrt-variance quadratures from a table",
    )
    parser.add_argument(
        "--log-level",
        choices=list(LOG_LEVELS),
        help="Set logging level (overrides config)",
    )


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse command-line arguments.

    Returns:
        argparse.Namespace: Parsed command-line arguments
    """
    parser = argparse.ArgumentParser(
        description="SGBM Exposure - exposure profiles, exposure Greeks and CVA by bundled regression",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Bermudan put under Heston, five seeds, both estimators
  sgbm-exposure run --preset TestA --seeds 1 2 3 4 5

  # Run a YAML configuration
  sgbm-exposure run --config runs/hhw_bermudan.yaml

  # Relative L2 distance between two exposure reports
  sgbm-exposure compare results/exposure_direct_seed1.csv results/exposure_path_seed1.csv

  # Cross-check moment backends and sample moments
  sgbm-exposure validate-moments --preset TestA --paths 200000

  # Write bundle assignments for scatter plots
  sgbm-exposure dump-bundles --preset TestA --paths 5000

  # Implied volatilities across strikes
  sgbm-exposure implied-vols --preset TestB_rho02_T10_European --strikes 40 80 100 120 180

  # List the built-in parameter sets
  sgbm-exposure preset-list
        """,
    )

    parser.add_argument(
        "--version",
        action="version",
        version=f"sgbm-exposure {__version__}",
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # Run command
    run_parser = subparsers.add_parser("run", help="Compute exposure reports for every seed")
    _add_source_arguments(run_parser)
    run_parser.add_argument(
        "--estimators", choices=["direct", "path", "both"], help="Estimators to report"
    )
    run_parser.add_argument(
        "--backend-check", action="store_true", help="Cross-check Heston moment backends"
    )
    run_parser.add_argument(
        "--moment-probe", action="store_true", help="Compare analytic and sample moments"
    )
    run_parser.add_argument(
        "--dump-bundles", action="store_true", help="Write bundle assignments and coefficients"
    )
    run_parser.add_argument("--dump-paths", action="store_true", help="Write the path cloud")

    # Compare command
    compare_parser = subparsers.add_parser(
        "compare", help="Relative L2 distance between two exposure reports"
    )
    compare_parser.add_argument("report_a", type=Path, help="Reference exposure CSV")
    compare_parser.add_argument("report_b", type=Path, help="Compared exposure CSV")
    compare_parser.add_argument("--output", type=Path, help="Write the distances as JSON")

    # Validate-moments command
    validate_parser = subparsers.add_parser(
        "validate-moments", help="Check discounted moments against each other and Monte Carlo"
    )
    _add_source_arguments(validate_parser)

    # Dump-bundles command
    bundles_parser = subparsers.add_parser(
        "dump-bundles", help="Write bundle assignments of one seed as CSV"
    )
    _add_source_arguments(bundles_parser)

    # Implied-vols command
    vols_parser = subparsers.add_parser(
        "implied-vols", help="SGBM and Monte Carlo implied volatilities across strikes"
    )
    _add_source_arguments(vols_parser)
    vols_parser.add_argument(
        "--strikes",
        type=float,
        nargs="+",
        default=list(DEFAULT_STRIKES),
        help="Strike strip (default: 40 80 100 120 180)",
    )

    # Preset-list command
    subparsers.add_parser("preset-list", help="List built-in parameter sets")

    return parser.parse_args(argv)


def load_config(args: argparse.Namespace) -> RunConfig:
    """Build the run configuration from a file or preset plus command-line overrides.

    Raises:
        ConfigurationError: If the configuration is invalid
    """
    if args.config:
        config = RunConfig.from_yaml(args.config, env_file=args.env_file)
    else:
        config = RunConfig.from_preset(args.preset)
        config.apply_environment(args.env_file)

    if args.output_dir:
        config.output_dir = args.output_dir
    if args.log_level:
        config.log_level = args.log_level
    if args.paths is not None:
        config.simulation.paths = args.paths
    if args.seeds:
        config.simulation.seeds = tuple(args.seeds)
    if args.workers is not None:
        config.simulation.workers = args.workers
    if args.order is not None:
        config.regression.order = args.order
    if args.method:
        config.regression.method = args.method
    if args.iterations is not None:
        config.regression.iterations = args.iterations
    if args.splits:
        config.regression.splits = tuple(args.splits)
    if args.moment_backend:
        config.regression.moment_backend = args.moment_backend
    if args.sqrt_variance_table:
        config.regression.sqrt_variance_table = True

    if getattr(args, "estimators", None):
        config.estimators = args.estimators
    for flag in ("backend_check", "moment_probe", "dump_bundles", "dump_paths"):
        if getattr(args, flag, False):
            setattr(config.validation, flag, True)

    config.validate()
    return config


def _report_failure(error: Exception) -> int:
    if isinstance(error, ConfigurationError):
        print(f"\n✗ Configuration error: {error}")
        print("\nPlease check the run configuration and command-line overrides.")
    elif isinstance(error, ReportError):
        print(f"\n✗ Report error: {error}")
    elif isinstance(error, SgbmExposureError):
        print(f"\n✗ Computation error: {error}")
    elif isinstance(error, OSError):
        print(f"\n✗ File error: {error}")
    else:
        logger.exception("Unexpected error")
        print(f"\n✗ Unexpected error: {error}")
    return EXIT_ERROR


def run_command(args: argparse.Namespace) -> int:
    """Run every seed and write the result bundle.

    Returns:
        int: Exit code (0 for success, 3 if a validation check failed, 1 otherwise)
    """
    try:
        config = load_config(args)
        outcome = run(config)
        for name, stats in outcome.summary["estimators"].items():
            v0, cva = stats["V0"], stats["CVA"]
            print(f"  {name:<6} V0 = {v0['mean']:.6f} (std {v0['std']:.2e})  CVA = {cva['mean']}")
        if not outcome.ok:
            for failure in outcome.failures:
                print(f"\n✗ Check failed: {failure}")
            return EXIT_CHECK_FAILED
        print(f"\n✓ Results written to {config.output_dir}")
        return EXIT_OK
    except Exception as e:
        return _report_failure(e)


def compare_command(args: argparse.Namespace) -> int:
    """Print the relative L2 distances between two reports.

    Returns:
        int: Exit code (0 for success, 1 for failure)
    """
    try:
        distances = compare(read_report(args.report_a), read_report(args.report_b))
        for quantity, value in distances.items():
            print(f"  {quantity:<8} {value:.6e}")
        if args.output:
            write_json(
                {"report_a": str(args.report_a), "report_b": str(args.report_b), **distances},
                args.output,
            )
            print(f"\n✓ Distances written to {args.output}")
        return EXIT_OK
    except Exception as e:
        return _report_failure(e)


def validate_moments_command(args: argparse.Namespace) -> int:
    """Run the moment checks and write their tables.

    Returns:
        int: Exit code (0 for success, 3 if a check failed, 1 otherwise)
    """
    try:
        config = load_config(args)
        files, failures = validate_moments(config)
        for path in files:
            print(f"  wrote {path}")
        if failures:
            for failure in failures:
                print(f"\n✗ Check failed: {failure}")
            return EXIT_CHECK_FAILED
        print("\n✓ Moment checks passed")
        return EXIT_OK
    except Exception as e:
        return _report_failure(e)


def dump_bundles_command(args: argparse.Namespace) -> int:
    """Write bundle assignments and coefficients for the first seed.

    Returns:
        int: Exit code (0 for success, 1 for failure)
    """
    try:
        config = load_config(args)
        for path in dump_bundles(config):
            print(f"  wrote {path}")
        print("\n✓ Bundles written")
        return EXIT_OK
    except Exception as e:
        return _report_failure(e)


def implied_vols_command(args: argparse.Namespace) -> int:
    """Price a strike strip with SGBM and Monte Carlo and invert to implied vols.

    Returns:
        int: Exit code (0 for success, 1 for failure)
    """
    try:
        config = load_config(args)
        table = implied_vols(config, args.strikes)
        print(table.to_string(index=False))
        print(f"\n✓ Implied volatilities written to {config.output_dir / 'implied_vols.csv'}")
        return EXIT_OK
    except Exception as e:
        return _report_failure(e)


def preset_list_command() -> int:
    """Print the built-in parameter sets.

    Returns:
        int: Exit code (0 for success)
    """
    table = preset_table()
    print(table.to_string(index=False))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    """Main entry point for the CLI.

    Returns:
        int: Exit code
    """
    args = parse_args(argv)

    if not args.command:
        print("Error: Please specify a command. Use --help for more information.")
        return EXIT_ERROR

    if args.command == "run":
        return run_command(args)
    elif args.command == "compare":
        return compare_command(args)
    elif args.command == "validate-moments":
        return validate_moments_command(args)
    elif args.command == "dump-bundles":
        return dump_bundles_command(args)
    elif args.command == "implied-vols":
        return implied_vols_command(args)
    elif args.command == "preset-list":
        return preset_list_command()

    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
