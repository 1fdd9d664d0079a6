# src/chordgraph/__init__.py
from chordgraph.exceptions import (
    ChordGraphError,
    EpisodeAbort,
    InfeasibleError,
    PlannerError,
    TaskConfigError,
)
from chordgraph.executor import EpisodeResult, Strategy, Trace, run_episode
from chordgraph.graph import (
    AugmentedGraph,
    TaskGraph,
    augment,
    build_graph,
    dist,
    filter_forward_moving,
    graph_to_document,
)
from chordgraph.harness import (
    ExperimentConfig,
    MetricsTable,
    emit_metrics,
    load_experiment,
    run_experiment,
    simulate,
)
from chordgraph.planner import (
    TaskSpec,
    clear_task_registry,
    load_task,
    register_task,
    request_plan,
    stub_planner,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AugmentedGraph",
    "ChordGraphError",
    "EpisodeAbort",
    "EpisodeResult",
    "ExperimentConfig",
    "InfeasibleError",
    "MetricsTable",
    "PlannerError",
    "Strategy",
    "TaskConfigError",
    "TaskGraph",
    "TaskSpec",
    "Trace",
    "augment",
    "build_graph",
    "clear_task_registry",
    "dist",
    "emit_metrics",
    "filter_forward_moving",
    "graph_to_document",
    "load_experiment",
    "load_task",
    "register_task",
    "request_plan",
    "run_episode",
    "run_experiment",
    "simulate",
    "stub_planner",
]
