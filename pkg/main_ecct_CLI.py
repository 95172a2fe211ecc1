"""Main script for running the ECCT edge-cloud simulator."""

import sys
import logging
import argparse
from datetime import datetime
from pathlib import Path
from typing import Dict, List

import config
from modules.datagen import write_csv
from modules.errors import EcctError
from modules.experiments import SUITES, run_suite
from modules.gradcheck import run_gradcheck_suite
from modules.orchestrator import build_environment, run_training
from modules.run_config import TrainingConfig, apply_overrides, build_config, load_config
from modules.run_store import render_comparison, render_report


# Set up logging
logging.basicConfig(
    level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(stream=sys.stdout)
    ]
)

logger = logging.getLogger(__name__)


def parse_overrides(extra: List[str]) -> Dict[str, str]:
    """Turns leftover ``--section.key value`` (or ``--key=value``) pairs into overrides.

    Args:
        extra: Arguments argparse did not recognize.

    Returns:
        Mapping of dotted config keys to raw string values.
    """
    overrides = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise EcctError(f"unexpected argument '{arg}'")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            raise EcctError(f"override '{arg}' has no value")
        overrides[key.replace("-", "_")] = value
    return overrides


def resolve_config(config_path, overrides: Dict[str, str]) -> TrainingConfig:
    cfg = load_config(config_path) if config_path else build_config()
    return apply_overrides(cfg, overrides) if overrides else cfg


def default_run_dir(prefix: str) -> Path:
    return Path(config.RUNS_DIR) / f"{prefix}-{datetime.now().strftime('%Y%m%d-%H%M%S')}"


def command_run(args, overrides):
    cfg = resolve_config(args.config, overrides)
    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir(cfg.method)
    result = run_training(cfg, run_dir)
    print(render_report(result.run_dir, last=args.last))


def command_gradcheck(args, overrides):
    frame = run_gradcheck_suite(n_configs=args.configs, seed=args.seed)
    summary = frame.groupby("kind").agg(configs=("passed", "size"), passed=("passed", "sum"), max_error=("max_error", "max"))
    print(summary.to_string(float_format=lambda v: f"{v:.2e}"))
    if not frame["passed"].all():
        sys.exit(1)


def command_gen_data(args, overrides):
    cfg = resolve_config(args.config, overrides)
    env = build_environment(cfg)
    path = write_csv(env.dataset, args.out)
    print(f"Wrote {env.dataset.num_samples} samples to {path}")


def command_report(args, overrides):
    print(render_report(args.run_dir, last=args.last))


def command_compare(args, overrides):
    print(render_comparison(args.run_a, args.run_b))


def command_suite(args, overrides):
    cfg = resolve_config(args.config, overrides)
    out = Path(args.out) if args.out else default_run_dir(f"suite-{args.name}")
    table = run_suite(args.name, cfg, seeds=args.seeds, jobs=args.jobs, suite_dir=out)
    print(table.to_text())


def main():
    """Main function to run the simulator CLI."""
    parser = argparse.ArgumentParser(
        description='ECCT simulator - edge-cloud collaborative knowledge transfer',
        epilog='Any config field can be overridden with its dotted name, e.g. --loss.alpha_s 0.5'
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    run_parser = subparsers.add_parser('run', help='Execute one training run')
    run_parser.add_argument('--config', type=str, help='YAML config file (defaults are used when omitted)')
    run_parser.add_argument('--run-dir', type=str, help='Output directory (default: a timestamped folder under ECCT_RUNS_DIR)')
    run_parser.add_argument('--last', type=int, default=10, help='Number of rounds shown in the summary')
    run_parser.set_defaults(handler=command_run)

    grad_parser = subparsers.add_parser('gradcheck', help='Finite-difference check of all analytic gradients')
    grad_parser.add_argument('--configs', type=int, default=200, help='Number of random configurations')
    grad_parser.add_argument('--seed', type=int, default=0)
    grad_parser.set_defaults(handler=command_gradcheck)

    data_parser = subparsers.add_parser('gen-data', help='Generate (or re-export) the dataset of a config as CSV')
    data_parser.add_argument('--config', type=str)
    data_parser.add_argument('--out', type=str, required=True, help='CSV file to write')
    data_parser.set_defaults(handler=command_gen_data)

    report_parser = subparsers.add_parser('report', help='Summarize a run directory')
    report_parser.add_argument('run_dir', type=str)
    report_parser.add_argument('--last', type=int, default=None, help='Only show the last N rounds')
    report_parser.set_defaults(handler=command_report)

    compare_parser = subparsers.add_parser('compare', help='Compare the final metrics of two runs')
    compare_parser.add_argument('run_a', type=str)
    compare_parser.add_argument('run_b', type=str)
    compare_parser.set_defaults(handler=command_compare)

    suite_parser = subparsers.add_parser('suite', help='Run a comparison suite')
    suite_parser.add_argument('name', choices=SUITES)
    suite_parser.add_argument('--config', type=str, help='Base YAML config')
    suite_parser.add_argument('--seeds', type=int, default=3, help='Seeds per cell (the cell is their median)')
    suite_parser.add_argument('--jobs', type=int, default=config.WORKERS, help='Parallel runs')
    suite_parser.add_argument('--out', type=str, help='Suite directory')
    suite_parser.set_defaults(handler=command_suite)

    args, extra = parser.parse_known_args()

    try:
        overrides = parse_overrides(extra)
        if overrides and args.command in ('gradcheck', 'report', 'compare'):
            parser.error(f"'{args.command}' does not take config overrides")
        args.handler(args, overrides)
    except EcctError as e:
        logger.error(f"Error occurred: {str(e)}")
        sys.exit(2)


if __name__ == "__main__":
    main()


## Example invocations:
# 1. One ECCT run with the desk-scale defaults:
# python main_ecct_CLI.py run --run-dir runs/ecct-default

# 2. A FedAvg baseline on federated features only, shorter:
# python main_ecct_CLI.py run --method fedavg --feature_setting F --rounds 20

# 3. Gradient oracle:
# python main_ecct_CLI.py gradcheck --configs 200

# 4. Table-style comparison suites:
# python main_ecct_CLI.py suite feature-settings --seeds 3 --jobs 4
