# src/chordgraph/cli.py
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
import sys
from typing import Any, Sequence

from pydantic import ValidationError
import yaml

from chordgraph.exceptions import (
    ChordGraphError,
    PlannerError,
    SchemaViolation,
    TaskConfigError,
)
from chordgraph.executor import Strategy
from chordgraph.harness import (
    load_experiment,
    metrics_csv,
    plan_report,
    run_experiment,
    seed_from_env,
    simulate,
)
from chordgraph.planner import DEFAULT_PLANNER_TIMEOUT, fetch_task, resolve_task
from chordgraph.utils import validation_error_keys

EXIT_OK = 0
EXIT_TASK_FAILED = 1
EXIT_CONFIG_ERROR = 2

logger = logging.getLogger(__name__)


def _render(document: Any, fmt: str) -> str:
    if fmt == "yaml":
        return str(yaml.safe_dump(document, sort_keys=False, allow_unicode=True))
    return json.dumps(document, indent=2, ensure_ascii=False)


def _write_or_print(content: str, output: str | None, what: str) -> None:
    if output:
        output_path = Path(output)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        output_path.write_text(content if content.endswith("\n") else content + "\n", "utf-8")
        print(f"{what} written to {output_path}")
    else:
        print(content)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chordgraph",
        description="Recovery-augmented task graphs: validate, plan, simulate and experiment",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Load a task file, filter its recovery branches and print the rejection report
  chordgraph validate tasks/single_arm_pour.json

  # Shipped tasks can be named instead of given as a path
  chordgraph plan "dual-arm pour water" --format yaml

  # One episode with 10% drops per held-object action, trace written as JSON lines
  chordgraph simulate "single-arm pour water" --strategy recovery --drop-prob 0.1 \\
      --seed 7 --trace-out traces/pour.jsonl

  # Full experiment from a config file
  chordgraph experiment experiments/pour.json --metrics-out results/pour.csv
        """,
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: WARNING)",
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    validate_parser = subparsers.add_parser(
        "validate", help="Load a task, filter its recovery branches and report rejections"
    )
    validate_parser.add_argument("task", help="Task file path or shipped task name")

    plan_parser = subparsers.add_parser(
        "plan", help="Print the augmented graph and a keyframe per node"
    )
    plan_parser.add_argument("task", help="Task file path or shipped task name")
    plan_parser.add_argument("--output", "-o", help="Output file path")
    plan_parser.add_argument(
        "--format",
        "-f",
        choices=["json", "yaml"],
        default="json",
        help="Output format (default: json)",
    )
    plan_parser.add_argument(
        "--no-keyframes", action="store_true", help="Skip keyframe synthesis"
    )
    plan_parser.add_argument(
        "--planner-endpoint",
        help=(
            "Fetch the graph and recovery spec from a planner service, using the task's "
            "instruction and scene as the request"
        ),
    )
    plan_parser.add_argument(
        "--timeout",
        type=float,
        default=DEFAULT_PLANNER_TIMEOUT,
        help=f"Planner request timeout in seconds (default: {DEFAULT_PLANNER_TIMEOUT:g})",
    )

    simulate_parser = subparsers.add_parser("simulate", help="Run a single episode")
    simulate_parser.add_argument("task", help="Task file path or shipped task name")
    simulate_parser.add_argument(
        "--strategy",
        choices=Strategy.choices(),
        default=Strategy.RECOVERY.value,
        help="Failure-handling strategy; agentchord is accepted for recovery (default: recovery)",
    )
    simulate_parser.add_argument(
        "--drop-prob",
        type=float,
        default=None,
        help="Per-action drop probability; replaces the task's own value",
    )
    simulate_parser.add_argument("--seed", type=int, default=None, help="Trial seed")
    simulate_parser.add_argument(
        "--randomization",
        type=float,
        default=0.0,
        help="Uniform x-y jitter of initial object poses in metres (default: 0)",
    )
    simulate_parser.add_argument("--trace-out", help="Write the episode trace (JSON lines)")

    experiment_parser = subparsers.add_parser("experiment", help="Run a full experiment")
    experiment_parser.add_argument("config", help="Experiment config file (JSON)")
    experiment_parser.add_argument("--trials", type=int, help="Trials per cell")
    experiment_parser.add_argument("--seed", type=int, help="Base seed")
    experiment_parser.add_argument("--metrics-out", help="Metrics CSV path")
    experiment_parser.add_argument("--trace-dir", help="Directory for per-trial traces")
    experiment_parser.add_argument(
        "--workers", type=int, help="Worker processes (0 uses every CPU)"
    )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
    )

    if not args.command:
        parser.print_help()
        return EXIT_CONFIG_ERROR

    handlers = {
        "validate": handle_validate,
        "plan": handle_plan,
        "simulate": handle_simulate,
        "experiment": handle_experiment,
    }
    try:
        return handlers[args.command](args)
    except (TaskConfigError, PlannerError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except ChordGraphError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_TASK_FAILED


def handle_validate(args: argparse.Namespace) -> int:
    """Handle validate command."""
    spec = resolve_task(args.task)
    graph = spec.graph
    report = graph.rejection_report()
    summary = {
        "task": spec.name,
        "source": spec.source,
        "nodes": len(graph.nodes),
        "nominal_edges": len(graph.nominal_edges),
        "recovery_edges": len(graph.recovery_edges),
        "retained": report["retained"],
        "rejected": report["rejected"],
    }
    print(json.dumps(summary, indent=2, ensure_ascii=False))
    return EXIT_OK


def handle_plan(args: argparse.Namespace) -> int:
    """Handle plan command."""
    spec = resolve_task(args.task)
    if args.planner_endpoint:
        spec = fetch_task(
            args.planner_endpoint, spec.instruction or spec.name, spec.scene, timeout=args.timeout
        )
    report = plan_report(spec, keyframes=not args.no_keyframes)
    _write_or_print(_render(report, args.format), args.output, "Plan")
    return EXIT_OK


def handle_simulate(args: argparse.Namespace) -> int:
    """Handle simulate command."""
    spec = resolve_task(args.task)
    seed = args.seed if args.seed is not None else seed_from_env(0)
    if args.drop_prob is not None and not 0.0 <= args.drop_prob <= 1.0:
        raise TaskConfigError(f"--drop-prob must lie in [0, 1], got {args.drop_prob}")
    result, trace = simulate(
        spec,
        args.strategy,
        seed=seed,
        p=args.drop_prob,
        randomization=args.randomization,
    )
    if args.trace_out:
        trace.write(args.trace_out)
    print(json.dumps(result.to_dict(), indent=2, ensure_ascii=False))
    return EXIT_OK if result.success else EXIT_TASK_FAILED


def handle_experiment(args: argparse.Namespace) -> int:
    """Handle experiment command."""
    config = load_experiment(args.config)
    updates: dict[str, Any] = {}
    if args.trials is not None:
        updates["trials"] = args.trials
    if args.seed is not None:
        updates["base_seed"] = args.seed
    if args.metrics_out is not None:
        updates["metrics_out"] = args.metrics_out
    if args.trace_dir is not None:
        updates["trace_dir"] = args.trace_dir
    if args.workers is not None:
        updates["workers"] = args.workers
    if updates:
        try:
            config = type(config).model_validate({**config.model_dump(), **updates})
        except ValidationError as exc:
            keys = validation_error_keys(exc)
            raise SchemaViolation(f"Invalid experiment override: {exc}", keys=keys) from exc
    table = run_experiment(config)
    if config.metrics_out:
        print(f"Metrics written to {config.metrics_out}")
    else:
        print(metrics_csv(table), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
