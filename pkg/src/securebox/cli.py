"""CLI interface for securebox — run, validate and compare scenarios.

Usage:
    # Run a scenario, writing metrics.csv and analytics.jsonl to ./out
    python -m securebox run scenarios/canonical.yaml --out out

    # Same scenario with collaboration switched off and another seed
    python -m securebox run scenarios/canonical.yaml --no-collab --seed 3 --out out-nocollab

    # Check a scenario file without running it
    python -m securebox validate scenarios/canonical.yaml

    # Per-segment analyzed/dropped fractions of two runs and their deltas
    python -m securebox compare out/metrics.csv out-nocollab/metrics.csv

Exit codes: 0 success, 1 invalid scenario or metrics file, 2 I/O error.
"""

from __future__ import annotations
import argparse
import logging
import sys
from pathlib import Path

from .config import DEFAULT_OUT, load_from_yaml
from .errors import ConfigInvalid, MetricsFileInvalid
from .metrics import compare, export_csv, format_comparison, load_csv
from .sim import simulate

logger = logging.getLogger(__name__)


def cmd_run(args: argparse.Namespace) -> None:
    """Run a scenario and write its metrics and analytics."""
    config = load_from_yaml(args.scenario).with_overrides(
        seed=args.seed,
        collaboration=False if args.no_collab else None,
    )
    result = simulate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_csv(result.metrics, out / "metrics.csv")
    result.cloud.export_analytics(out / "analytics.jsonl")
    summary = result.analytics[0]
    sys.stderr.write(
        f"{config.name}: {len(result.trace)} flows, {summary['requests']} css requests, "
        f"{summary['detections']} detections → {out}\n")


def cmd_validate(args: argparse.Namespace) -> None:
    """Load a scenario and report what it declares."""
    config = load_from_yaml(args.scenario)
    hosts = sum(len(s.hosts) for s in config.segments)
    sys.stdout.write(
        f"{args.scenario}: ok ({len(config.segments)} segments, {hosts} hosts, "
        f"{config.attack.count} attackers, {len(config.failures)} failures, "
        f"{config.duration} ticks)\n")


def cmd_compare(args: argparse.Namespace) -> None:
    """Print per-segment fractions of two metrics files side by side."""
    result = compare(load_csv(args.run_a), load_csv(args.run_b))
    sys.stdout.write(format_comparison(result) + "\n")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="securebox",
        description="Securebox gateways and cloud security service, simulated",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="More logging (repeat for debug)")
    parser.add_argument("-q", "--quiet", action="store_true", help="Errors only")

    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="Run a scenario file")
    run.add_argument("scenario", help="Scenario YAML file")
    run.add_argument("--out", default=DEFAULT_OUT, help="Output directory")
    run.add_argument("--no-collab", action="store_true", help="Disable collaborative mitigation")
    run.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
    validate = sub.add_parser("validate", help="Validate a scenario file")
    validate.add_argument("scenario", help="Scenario YAML file")
    cmp = sub.add_parser("compare", help="Compare two metrics CSV files")
    cmp.add_argument("run_a")
    cmp.add_argument("run_b")

    args = parser.parse_args(argv)

    if args.quiet:
        level = logging.ERROR
    else:
        level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    cmds = {
        "run": cmd_run,
        "validate": cmd_validate,
        "compare": cmd_compare,
    }
    try:
        cmds[args.command](args)
    except ConfigInvalid as e:
        sys.stderr.write(f"{getattr(args, 'scenario', '')}: {e}\n")
        return 1
    except MetricsFileInvalid as e:
        sys.stderr.write(f"{e}\n")
        return 1
    except OSError as e:
        sys.stderr.write(f"{e}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
