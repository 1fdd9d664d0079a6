# tests/test_public_api.py
"""Tests for the public API surface of chordgraph."""

import chordgraph


class TestAPISurface:
    """Verify __all__ matches exactly the declared public names."""

    def test_all_exports(self) -> None:
        assert set(chordgraph.__all__) == {
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
        }

    def test_version_matches_distribution_metadata(self) -> None:
        from importlib.metadata import version

        assert chordgraph.__version__ == version("chordgraph")

    def test_version_is_string(self) -> None:
        assert isinstance(chordgraph.__version__, str)

    def test_public_names_are_importable(self) -> None:
        for name in chordgraph.__all__:
            assert getattr(chordgraph, name) is not None

    def test_errors_share_a_base(self) -> None:
        for error in (
            chordgraph.EpisodeAbort,
            chordgraph.InfeasibleError,
            chordgraph.PlannerError,
            chordgraph.TaskConfigError,
        ):
            assert issubclass(error, chordgraph.ChordGraphError)
