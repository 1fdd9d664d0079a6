# src/chordgraph/harness.py
"""Randomized trials across tasks, drop probabilities and strategies.

Each trial is independent: its seed is ``base_seed + index`` and every random stream is
spawned from that seed, so the metrics of one cell do not depend on which other cells
share the experiment or on how trials are spread over worker processes.
"""

from __future__ import annotations

from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import asdict, dataclass, field
from functools import lru_cache
import io
import logging
import math
import os
from pathlib import Path
import re
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from chordgraph.exceptions import InfeasibleError, SchemaViolation, TaskConfigError
from chordgraph.executor import (
    EpisodeResult,
    NullTrace,
    Strategy,
    Trace,
    run_episode,
    spawn_streams,
)
from chordgraph.graph import graph_to_document
from chordgraph.planner import TaskSpec, parse_document, resolve_task, task_from_data
from chordgraph.schema import ScheduledEventDoc
from chordgraph.simworld import DisturbanceModel, build_world
from chordgraph.skills import ground_truth_estimate
from chordgraph.solvers import SubgoalProblem, build_collision_field, solve_subgoal
from chordgraph.utils import canonical_json, validation_error_keys

logger = logging.getLogger(__name__)

SEED_ENV = "CHORDGRAPH_SEED"

METRICS_COLUMNS = (
    "task",
    "p",
    "strategy",
    "success_rate",
    "mean_steps",
    "mean_time_s",
    "mean_triggers",
    "n",
    "stderr",
)


class ExperimentConfig(BaseModel):
    """One experiment: the cross product of tasks, drop probabilities and strategies."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    tasks: list[str] = Field(min_length=1, description="Task file paths or shipped task names.")
    strategies: list[Strategy] = Field(
        default_factory=lambda: [Strategy.RECOVERY, Strategy.BACKTRACK, Strategy.NONE],
        min_length=1,
    )
    drop_probs: list[float] = Field(default_factory=lambda: [0.0, 0.05, 0.10], min_length=1)
    trials: int = Field(default=100, ge=1)
    base_seed: int = Field(default=0, ge=0)
    randomization: float = Field(
        default=0.02, ge=0.0, description="Uniform x-y jitter of initial object poses (m)."
    )
    scheduled_events_per_trial: int = Field(
        default=0, ge=0, le=2, description="Random scheduled drops added to every trial."
    )
    trace_dir: str | None = None
    metrics_out: str | None = None
    workers: int = Field(default=0, ge=0, description="0 uses every available CPU.")
    overrides: dict[str, dict[str, Any]] = Field(default_factory=dict)

    @field_validator("strategies", mode="before")
    @classmethod
    def _resolve_aliases(cls, value: Any) -> Any:
        if not isinstance(value, list):
            return value
        resolved: list[Any] = []
        for item in value:
            try:
                resolved.append(Strategy(item))
            except (TypeError, ValueError):
                resolved.append(item)
        return resolved

    @field_validator("drop_probs")
    @classmethod
    def _check_probs(cls, value: list[float]) -> list[float]:
        for p in value:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"drop probability must lie in [0, 1], got {p}")
        return value


def seed_from_env(default: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise TaskConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def load_experiment(path: str | Path) -> ExperimentConfig:
    """Load an experiment file; ``CHORDGRAPH_SEED`` replaces its base seed.

    Raises:
        TaskConfigError: unreadable file or bad seed variable.
        ParseError: invalid JSON.
        SchemaViolation: the document does not validate (unknown strategy and so on).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TaskConfigError(f"Cannot read experiment file {path}: {exc}") from exc
    data = parse_document(text, source=str(path))
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        keys = validation_error_keys(exc)
        raise SchemaViolation(f"Invalid experiment file {path}: {exc}", keys=keys) from exc
    seed = seed_from_env(config.base_seed)
    if seed != config.base_seed:
        logger.info("Base seed %d replaced by %s=%d", config.base_seed, SEED_ENV, seed)
        config = config.model_copy(update={"base_seed": seed})
    return config


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialJob:
    """Everything a worker process needs to run one trial."""

    task: str
    document: Mapping[str, Any]
    strategy: str
    p: float
    index: int
    seed: int
    randomization: float = 0.0
    scheduled_events: int = 0
    trace_path: str | None = None


@dataclass(frozen=True)
class TrialRecord:
    task: str
    p: float
    strategy: str
    index: int
    seed: int
    success: bool
    episode_steps: int = 0
    simulated_time: float = 0.0
    triggers: int = 0
    switches: int = 0
    planner_calls: int = 0
    reason: str = ""

    @classmethod
    def from_result(cls, job: TrialJob, result: EpisodeResult) -> "TrialRecord":
        return cls(
            task=job.task,
            p=job.p,
            strategy=job.strategy,
            index=job.index,
            seed=job.seed,
            success=result.success,
            episode_steps=result.episode_steps,
            simulated_time=result.simulated_time,
            triggers=result.triggers,
            switches=result.switches,
            planner_calls=result.planner_calls,
            reason=result.reason,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@lru_cache(maxsize=16)
def _spec_from_json(text: str) -> TaskSpec:
    return task_from_data(parse_document(text))


def _nominal_action_count(spec: TaskSpec) -> int:
    graph = spec.graph
    return sum(
        len(edge.program) if isinstance(edge.program, tuple) else 1
        for edge in graph.nominal_edges
    )


def random_scheduled_drops(
    spec: TaskSpec, count: int, rng: np.random.Generator
) -> tuple[ScheduledEventDoc, ...]:
    """``count`` drops of whatever is held, at random nominal actions and offsets."""
    if count <= 0:
        return ()
    actions = max(1, _nominal_action_count(spec))
    indices = sorted(rng.choice(actions, size=min(count, actions), replace=False).tolist())
    return tuple(
        ScheduledEventDoc(kind="drop", at_action=int(i), offset=int(rng.integers(1, 6)))
        for i in indices
    )


def trial_header(spec: TaskSpec, strategy: Strategy, seed: int, p: float) -> dict[str, Any]:
    return {
        "task": spec.name,
        "strategy": strategy.value,
        "seed": seed,
        "p": p,
        "config": spec.resolved_config().model_dump(mode="json"),
    }


def simulate(
    spec: TaskSpec,
    strategy: Strategy | str,
    *,
    seed: int = 0,
    p: float | None = None,
    randomization: float = 0.0,
    scheduled_events: int = 0,
    record: bool = True,
) -> tuple[EpisodeResult, Trace]:
    """Run one episode of ``spec``.

    The task's own disturbance block applies; ``p`` replaces its drop probability and
    ``scheduled_events`` adds random drops on top of its scheduled events.
    """
    strategy = Strategy(strategy)
    config = spec.resolved_config()
    rngs = spawn_streams(seed)
    world = build_world(spec.scene, config.solver, rngs["randomization"], jitter=randomization)
    base = DisturbanceModel.from_doc(spec.document.disturbance)
    events = base.events + random_scheduled_drops(spec, scheduled_events, rngs["randomization"])
    disturbance = DisturbanceModel(
        mode=base.mode if p is None else "bernoulli",
        p=base.p if p is None else p,
        events=events,
    )
    header = trial_header(spec, strategy, seed, disturbance.p)
    trace = Trace(header) if record else NullTrace(header)
    return run_episode(
        spec.graph, world, strategy, config, rngs, disturbance=disturbance, trace=trace
    )


def run_trial(job: TrialJob) -> TrialRecord:
    """Run one trial; any exception becomes a failed record instead of propagating."""
    try:
        spec = _spec_from_json(canonical_json(job.document))
        result, trace = simulate(
            spec,
            job.strategy,
            seed=job.seed,
            p=job.p,
            randomization=job.randomization,
            scheduled_events=job.scheduled_events,
            record=job.trace_path is not None,
        )
        if job.trace_path is not None:
            trace.write(job.trace_path)
        return TrialRecord.from_result(job, result)
    except Exception as exc:
        logger.error(
            "Trial %s/p=%s/%s #%d failed: %s", job.task, job.p, job.strategy, job.index, exc
        )
        return TrialRecord(
            task=job.task,
            p=job.p,
            strategy=job.strategy,
            index=job.index,
            seed=job.seed,
            success=False,
            reason=f"{type(exc).__name__}: {exc}",
        )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    task: str
    p: float
    strategy: str
    success_rate: float
    mean_steps: float
    mean_time_s: float
    mean_triggers: float
    n: int
    stderr: float

    @classmethod
    def from_records(cls, records: Sequence[TrialRecord]) -> "MetricsRow":
        if not records:
            raise ValueError("a metrics row needs at least one trial")
        first = records[0]
        n = len(records)
        rate = sum(r.success for r in records) / n
        return cls(
            task=first.task,
            p=first.p,
            strategy=first.strategy,
            success_rate=100.0 * rate,
            mean_steps=sum(r.episode_steps for r in records) / n,
            mean_time_s=sum(r.simulated_time for r in records) / n,
            mean_triggers=sum(r.triggers for r in records) / n,
            n=n,
            stderr=math.sqrt(rate * (1.0 - rate) / n),
        )

    def cells(self) -> list[str]:
        return [
            self.task,
            f"{self.p:.4f}",
            self.strategy,
            f"{self.success_rate:.4f}",
            f"{self.mean_steps:.4f}",
            f"{self.mean_time_s:.4f}",
            f"{self.mean_triggers:.4f}",
            str(self.n),
            f"{self.stderr:.4f}",
        ]


@dataclass(frozen=True)
class MetricsTable:
    rows: tuple[MetricsRow, ...] = ()
    records: tuple[TrialRecord, ...] = field(default=(), repr=False)

    @classmethod
    def from_records(cls, records: Iterable[TrialRecord]) -> "MetricsTable":
        """Group by (task, p, strategy); rows and records come out sorted."""
        ordered = sorted(records, key=lambda r: (r.task, r.p, r.strategy, r.index))
        cells: dict[tuple[str, float, str], list[TrialRecord]] = defaultdict(list)
        for record in ordered:
            cells[(record.task, record.p, record.strategy)].append(record)
        rows = tuple(MetricsRow.from_records(cells[key]) for key in sorted(cells))
        return cls(rows=rows, records=tuple(ordered))

    def row(self, task: str, p: float, strategy: Strategy | str) -> MetricsRow:
        strategy = Strategy(strategy).value
        for row in self.rows:
            if row.task == task and math.isclose(row.p, p) and row.strategy == strategy:
                return row
        raise KeyError((task, p, strategy))


def metrics_csv(table: MetricsTable) -> str:
    """CSV text with a fixed column order and 4-decimal floats; header only when empty."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in table.rows:
        writer.writerow(row.cells())
    return buffer.getvalue()


def emit_metrics(table: MetricsTable, path: str | Path) -> Path:
    """Write :func:`metrics_csv` to ``path``.

    Raises:
        OSError: the file cannot be written.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8", newline="") as handle:
        handle.write(metrics_csv(table))
    logger.info("Wrote %d metrics rows to %s", len(table.rows), target)
    return target


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_") or "task"


def plan_trials(config: ExperimentConfig, specs: Sequence[TaskSpec]) -> list[TrialJob]:
    trace_dir = Path(config.trace_dir) if config.trace_dir else None
    jobs: list[TrialJob] = []
    for spec in specs:
        document = spec.to_dict()
        for p in config.drop_probs:
            for strategy in config.strategies:
                for index in range(config.trials):
                    trace_path = None
                    if trace_dir is not None:
                        name = f"{_slug(spec.name)}_p{p:.4f}_{strategy.value}_{index:05d}.jsonl"
                        trace_path = str(trace_dir / name)
                    jobs.append(
                        TrialJob(
                            task=spec.name,
                            document=document,
                            strategy=strategy.value,
                            p=p,
                            index=index,
                            seed=config.base_seed + index,
                            randomization=config.randomization,
                            scheduled_events=config.scheduled_events_per_trial,
                            trace_path=trace_path,
                        )
                    )
    return jobs


def run_trials(jobs: Sequence[TrialJob], workers: int = 0) -> list[TrialRecord]:
    """Run ``jobs`` serially or on a process pool; records come back in job order."""
    workers = workers or os.cpu_count() or 1
    if workers == 1 or len(jobs) <= 1:
        return [run_trial(job) for job in jobs]
    chunksize = max(1, len(jobs) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_trial, jobs, chunksize=chunksize))


def run_experiment(config: ExperimentConfig) -> MetricsTable:
    """Run every trial of ``config`` and aggregate; writes the CSV when ``metrics_out`` is set.

    Raises:
        TaskConfigError: a task cannot be resolved or an override is invalid.
    """
    specs = [resolve_task(task).overridden(config.overrides) for task in config.tasks]
    jobs = plan_trials(config, specs)
    logger.info(
        "Running %d trials over %d tasks with %d worker(s)",
        len(jobs),
        len(specs),
        config.workers or os.cpu_count() or 1,
    )
    table = MetricsTable.from_records(run_trials(jobs, config.workers))
    if config.metrics_out:
        emit_metrics(table, config.metrics_out)
    return table


# ---------------------------------------------------------------------------
# Plan report
# ---------------------------------------------------------------------------


def keyframe_report(spec: TaskSpec, seed: int = 0) -> dict[str, Any]:
    """A keyframe per node, solved against the initial scene; infeasible nodes say so."""
    config = spec.resolved_config()
    world = build_world(spec.scene, config.solver)
    estimate = ground_truth_estimate(world)
    field_ = build_collision_field(spec.scene, config.solver)
    rng = np.random.default_rng(seed)
    report: dict[str, Any] = {}
    for node_id in sorted(spec.graph.nodes):
        node = spec.graph.nodes[node_id]
        problem = SubgoalProblem.for_node(node, estimate, world.workspace, field_, config.solver)
        try:
            poses = solve_subgoal(problem, rng)
        except InfeasibleError as exc:
            report[node_id] = {"feasible": False, "reason": str(exc)}
            continue
        report[node_id] = {
            "feasible": True,
            "poses": {arm: pose.to_dict() for arm, pose in sorted(poses.items())},
        }
    return report


def plan_report(spec: TaskSpec, *, keyframes: bool = True) -> dict[str, Any]:
    graph = spec.graph
    report: dict[str, Any] = {
        "task": spec.name,
        "instruction": spec.instruction,
        "nominal_path": graph.nominal_path(),
        "graph": graph_to_document(graph),
        "rejections": graph.rejection_report()["rejected"],
    }
    if keyframes:
        report["keyframes"] = keyframe_report(spec)
    return report
