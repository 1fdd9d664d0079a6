# tests/test_executor.py
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pytest

from chordgraph.config import NoiseConfig, ResolvedConfig, SolverConfig
from chordgraph.exceptions import DeadEnd
from chordgraph.detectors import required_keys
from chordgraph.executor import (
    SUBGOAL_UNMET,
    ChunkStatus,
    EdgeRun,
    Episode,
    EpisodeResult,
    Strategy,
    Trace,
    run_chunk,
    run_episode,
    select_edge,
    spawn_streams,
)
from chordgraph.graph import AugmentedGraph, augment, build_graph
from chordgraph.harness import simulate
from chordgraph.monitors import compile_edge_monitors
from chordgraph.planner import SHIPPED_TASKS, stub_planner
from chordgraph.schema import ScheduledEventDoc, SceneDoc
from chordgraph.simworld import DisturbanceModel, WorldState, build_world

CONFIG = ResolvedConfig(
    noise=NoiseConfig(sigma=0.0),
    solver=SolverConfig(restarts=6, refine=2, max_iterations=100),
)
HOLDING = {"template": "attach", "object": "bottle", "arm": "right", "delta_attach": 0.02}
DROP_DURING_LIFT = DisturbanceModel(
    mode="scheduled", events=(ScheduledEventDoc(kind="drop", at_action=1),)
)


def _lift_task() -> dict[str, Any]:
    """Grasp the bottle, lift it; a dropped bottle is re-grasped."""
    return {
        "name": "lift bottle",
        "nodes": [
            {"id": "start"},
            {
                "id": "grasped",
                "sub_goals": [{"template": "expr", "expr": "1 - gripper_closed(right)"}],
            },
            {"id": "lifted", "kind": "terminal", "sub_goals": [HOLDING]},
        ],
        "edges": [
            {
                "id": "grasp",
                "from": "start",
                "to": "grasped",
                "program": [{"action": "grasp", "robot": "right", "obj": "bottle"}],
            },
            {
                "id": "lift",
                "from": "grasped",
                "to": "lifted",
                "program": [{"action": "move_by_offset", "robot": "right", "dz": 0.1}],
            },
        ],
        "start": "start",
        "terminal": "lifted",
        "recovery": [
            {
                "failure_mode": {"id": "bottle_dropped", "edge": "lift", "detector": HOLDING},
                "intent": "re-grasp the bottle",
                "entry": {
                    "id": "regrasp",
                    "program": [{"action": "grasp", "robot": "right", "obj": "bottle"}],
                },
                "merge_to": "grasped",
            }
        ],
    }


def _raise_task(height: float) -> dict[str, Any]:
    """Grasp the bottle and raise it until its centroid is ``height`` above the table.

    A bottle dropped on the way is grasped again and raised from there; a drop during
    that regrasp runs the regrasp again.
    """
    doc = _lift_task()
    doc["nodes"][2]["sub_goals"] = [
        HOLDING,
        {"template": "expr", "expr": f"{height} - centroid(bottle)[2]"},
    ]
    held_drop = "gripper_closed(right) * (norm(centroid(bottle) - gripper_origin(right)) - 0.08)"
    doc["recovery"] = [
        {
            "failure_mode": {"id": "bottle_dropped", "edge": "lift", "detector": HOLDING},
            "entry": {
                "id": "regrasp",
                "program": [
                    {"action": "grasp", "robot": "right", "obj": "bottle"},
                    {"action": "move_by_offset", "robot": "right", "dz": 0.2},
                ],
            },
            "merge_to": "lifted",
        },
        {
            "failure_mode": {
                "id": "bottle_dropped",
                "edge": "regrasp",
                "detector": {"template": "expr", "expr": held_drop},
            },
            "route_to": "regrasp",
        },
    ]
    return doc


def _drops(*actions: int) -> DisturbanceModel:
    return DisturbanceModel(
        mode="scheduled",
        events=tuple(ScheduledEventDoc(kind="drop", at_action=a) for a in actions),
    )


def _assert_switch_on_kth_violation(trace: Trace, k: int = 3) -> int:
    """Check every trigger against the monitor samples before it; returns the count."""
    events = trace.events
    triggers = 0
    for index, event in enumerate(events):
        if event.kind != "trigger":
            continue
        triggers += 1
        samples = [
            e
            for e in events[:index]
            if e.kind == "monitor_eval"
            and e.payload["edge"] == event.payload["edge"]
            and e.payload["failure"] == event.payload["failure"]
        ]
        assert [e.payload["violated"] for e in samples[-k:]] == [True] * k
        assert len({e.step for e in samples[-k:]}) == k
        assert samples[-1].step == event.step
        switch = events[index + 1]
        assert (switch.kind, switch.step) == ("edge_switch", event.step)
    kinds = [e.kind for e in events]
    if "command" in kinds:
        assert "planner_call" not in kinds[kinds.index("command"):]
    return triggers


@pytest.fixture
def graph() -> AugmentedGraph:
    doc = _lift_task()
    return augment(build_graph(doc), doc["recovery"])


@pytest.fixture
def new_world(make_scene: Callable[..., SceneDoc]) -> Callable[[], WorldState]:
    bottle = {
        "id": "bottle",
        "shape": "cylinder",
        "dims": [0.03, 0.2],
        "pose": {"position": [0.45, -0.15, 0.1]},
    }
    scene = make_scene(objects=[bottle])
    return lambda: build_world(scene, CONFIG.solver)


class TestStrategy:
    """Tests for strategy properties and random streams."""

    def test_planner_stages(self) -> None:
        """Test that only the recovery strategy pays for branch orchestration."""
        assert Strategy.RECOVERY.planner_stages == ("structure", "orchestrate", "compile-hints")
        assert Strategy.BACKTRACK.planner_stages == ("structure", "compile-hints")
        assert not Strategy.NONE.monitored
        assert Strategy("backtrack").monitored

    @pytest.mark.parametrize("name", ["agentchord", "AgentChord", "recovery"])
    def test_recovery_aliases(self, name: str) -> None:
        """Test that the recovery strategy is also accepted under its published name."""
        assert Strategy(name) is Strategy.RECOVERY
        assert Strategy(name).value == "recovery"

    def test_choices(self) -> None:
        """Test the spellings offered on the command line."""
        assert Strategy.choices() == ["recovery", "backtrack", "none", "agentchord"]
        with pytest.raises(ValueError):
            Strategy("teleport")

    def test_streams_are_independent_and_seeded(self) -> None:
        """Test that every stream is reproducible and distinct from the others."""
        first, second = spawn_streams(7), spawn_streams(7)
        assert set(first) == {"perception", "disturbance", "solver", "randomization"}
        draws = {name: rng.random(4) for name, rng in first.items()}
        for name, rng in second.items():
            assert np.array_equal(draws[name], rng.random(4))
        assert not np.array_equal(draws["perception"], draws["disturbance"])


class TestTrace:
    """Tests for the episode trace."""

    def test_rejects_unknown_kind(self) -> None:
        """Test that only the documented event kinds are accepted."""
        with pytest.raises(ValueError, match="Unknown trace event kind"):
            Trace().emit(0, "teleport")

    def test_steps_are_nondecreasing(self) -> None:
        """Test that a step earlier than the last event is rejected."""
        trace = Trace()
        trace.emit(3, "command")
        with pytest.raises(ValueError, match="nondecreasing"):
            trace.emit(2, "trigger")

    def test_write_jsonl(self, tmp_path: Path) -> None:
        """Test that the header comes first and every line is canonical JSON."""
        trace = Trace({"task": "t", "seed": 1})
        trace.emit(0, "planner_call", stage="structure", latency=5.0)
        path = trace.write(tmp_path / "traces" / "t.jsonl")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert json.loads(lines[0]) == {"header": {"seed": 1, "task": "t"}}
        assert json.loads(lines[1])["payload"]["stage"] == "structure"
        assert lines[0] == '{"header":{"seed":1,"task":"t"}}'


class TestSelectEdge:
    """Tests for select_edge()."""

    def test_pending_recovery_edge_wins(self, graph: AugmentedGraph) -> None:
        """Test that a pending recovery edge takes precedence over nominal ones."""
        assert select_edge(graph, "grasped").id == "lift"
        assert select_edge(graph, "grasped", "regrasp").id == "regrasp"

    def test_dead_end(self, graph: AugmentedGraph) -> None:
        """Test that a non-terminal node without out-edges is a dead end."""
        with pytest.raises(DeadEnd):
            select_edge(graph, "lifted")


class TestRunChunk:
    """Tests for run_chunk()."""

    @pytest.fixture
    def episode(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> Episode:
        return Episode(
            graph,
            new_world(),
            Strategy.RECOVERY,
            CONFIG,
            spawn_streams(0),
            DROP_DURING_LIFT,
            Trace(),
        )

    def _edge_run(self, episode: Episode, node: str) -> EdgeRun:
        edge = select_edge(episode.graph, node)
        detectors = [mode.detector for mode in edge.failure_modes]
        entry = episode.sense(required_keys(detectors)) if detectors else None
        return EdgeRun(episode, edge, compile_edge_monitors(edge, entry))

    def test_chunk_then_subgoal(self, episode: Episode) -> None:
        """Test that a chunk stops at its limit and later at the reached sub-goal."""
        run = self._edge_run(episode, "start")
        first = run_chunk(run, 3)
        assert (first.status, first.steps) == (ChunkStatus.CHUNK, 3)
        second = run_chunk(run, 100)
        assert second.status is ChunkStatus.REACHED
        assert episode.world.grippers["right"].held == "bottle"
        assert len(episode.trace.of_kind("command")) == 3 + second.steps

    def test_trigger_ends_chunk(self, episode: Episode) -> None:
        """Test that a persistent violation ends the chunk with its failure id."""
        run_chunk(self._edge_run(episode, "start"), 100)
        result = run_chunk(self._edge_run(episode, "grasped"), 100)
        assert result.status is ChunkStatus.TRIGGER
        assert result.failure_id == "bottle_dropped"
        assert result.steps == 3


class TestRunEpisode:
    """End-to-end traversals in the simulated world."""

    def test_undisturbed_episode(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test a clean run: the lift edge completes on its first step."""
        result, trace = run_episode(graph, new_world(), "none", CONFIG, rng=0, trace=Trace())
        assert result.success
        assert result.final_node == "lifted"
        assert result.episode_steps == 25
        assert result.planner_calls == 2
        assert result.simulated_time == pytest.approx(25 * 0.1 + 2 * 5.0)
        assert [e.payload["node"] for e in trace.of_kind("node_complete")] == [
            "grasped",
            "lifted",
        ]
        assert trace.events[-1].kind == "terminal"
        assert trace.header["strategy"] == "none"

    def test_recovery_switch_after_persistence(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that a drop triggers on the third violation and switches without planning."""
        result, trace = run_episode(
            graph,
            new_world(),
            Strategy.RECOVERY,
            CONFIG,
            rng=0,
            disturbance=DROP_DURING_LIFT,
            trace=Trace(),
        )
        assert result.success
        assert (result.triggers, result.switches, result.planner_calls) == (1, 1, 3)

        lift_evals = [e for e in trace.of_kind("monitor_eval") if e.payload["edge"] == "lift"]
        assert [e.payload["violated"] for e in lift_evals[:3]] == [True, True, True]
        kinds = [e.kind for e in trace.events]
        trigger = kinds.index("trigger")
        assert kinds[trigger + 1] == "edge_switch"
        switch = trace.events[trigger + 1].payload
        assert (switch["from"], switch["to"], switch["failure"]) == (
            "lift",
            "regrasp",
            "bottle_dropped",
        )
        assert trace.events[trigger].step == trace.events[trigger + 1].step
        assert "planner_call" not in kinds[kinds.index("command"):]
        assert len(trace.of_kind("disturbance")) == 1

    def test_open_loop_fails_after_drop(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that without monitors the dropped bottle fails the terminal check."""
        result, trace = run_episode(
            graph,
            new_world(),
            "none",
            CONFIG,
            rng=0,
            disturbance=DROP_DURING_LIFT,
            trace=Trace(),
        )
        assert not result.success
        assert result.reason == "terminal-constraints-unmet"
        assert result.triggers == 0
        assert trace.of_kind("monitor_eval") == []

    def test_backtrack_resets_instead_of_branching(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that backtracking replays the nominal edge and never enters recovery."""
        _, trace = run_episode(
            graph,
            new_world(),
            "backtrack",
            CONFIG,
            rng=0,
            disturbance=DROP_DURING_LIFT,
            trace=Trace(),
        )
        switches = [e.payload for e in trace.of_kind("edge_switch")]
        assert switches
        assert switches[0]["node"] == "grasped"
        assert switches[0]["to"] == "lift"
        assert all(s["to"] != "regrasp" for s in switches)

    def test_backtrack_regresses_on_repeated_failure(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that a replay failing again resets one keyframe further back."""
        result, trace = run_episode(
            graph,
            new_world(),
            "backtrack",
            CONFIG,
            rng=0,
            disturbance=DROP_DURING_LIFT,
            trace=Trace(),
        )
        assert result.success
        assert (result.triggers, result.switches) == (2, 2)
        switches = [(e.payload["node"], e.payload["to"]) for e in trace.of_kind("edge_switch")]
        assert switches == [("grasped", "lift"), ("start", "grasp")]
        completed = [e.payload["node"] for e in trace.of_kind("node_complete")]
        assert completed == ["grasped", "grasped", "lifted"]

    def test_backtrack_costs_more_steps_than_recovery(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that resets and replays cost more control steps than the recovery branch."""
        steps = {
            strategy: run_episode(
                graph, new_world(), strategy, CONFIG, rng=0, disturbance=DROP_DURING_LIFT
            )[0].episode_steps
            for strategy in ("recovery", "backtrack")
        }
        assert steps["recovery"] < steps["backtrack"]

    def test_disturbance_event_payload(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that a logged disturbance keeps its own kind under the ``event`` key."""
        _, trace = run_episode(
            graph,
            new_world(),
            "recovery",
            CONFIG,
            rng=0,
            disturbance=DROP_DURING_LIFT,
            trace=Trace(),
        )
        (event,) = trace.of_kind("disturbance")
        assert event.payload["event"] == "drop"
        assert event.payload["object"] == "bottle"
        assert event.payload["disturbance"] is True
        assert "kind" not in event.payload and "step" not in event.payload
        line = json.loads(trace.to_jsonl().splitlines()[trace.events.index(event) + 1])
        assert (line["kind"], line["step"]) == ("disturbance", event.step)

    def test_alias_is_written_canonically(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that an episode run as agentchord records the recovery strategy."""
        result, trace = run_episode(graph, new_world(), "agentchord", CONFIG, rng=0, trace=Trace())
        assert result.success
        assert result.planner_calls == 3
        assert trace.header["strategy"] == "recovery"

    @pytest.mark.parametrize("seed", range(4))
    def test_trigger_latency(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState], seed: int
    ) -> None:
        """Test that the switch lands on the step of the third consecutive violation."""
        _, trace = run_episode(
            graph,
            new_world(),
            "recovery",
            CONFIG,
            rng=seed,
            disturbance=DROP_DURING_LIFT,
            trace=Trace(),
        )
        assert _assert_switch_on_kth_violation(trace) == 1

    def test_same_seed_same_trace(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that a trial is a pure function of its seed."""
        runs = [
            run_episode(
                graph,
                new_world(),
                "recovery",
                CONFIG,
                rng=11,
                disturbance=DROP_DURING_LIFT,
                trace=Trace(),
            )
            for _ in range(2)
        ]
        assert runs[0][0] == runs[1][0]
        assert runs[0][1].to_jsonl() == runs[1][1].to_jsonl()

    def test_step_budget_aborts(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that running out of control steps ends the episode with its reason."""
        config = CONFIG.model_copy(
            update={"executor": CONFIG.executor.model_copy(update={"step_budget": 10})}
        )
        result, _ = run_episode(graph, new_world(), "none", config, rng=0)
        assert not result.success
        assert result.episode_steps == 10
        assert result.reason == "StepBudgetExceeded"

    def test_result_dict(self) -> None:
        """Test the serialized result fields."""
        result = EpisodeResult(success=True, episode_steps=3, simulated_time=0.3)
        assert list(result.to_dict()) == [
            "success",
            "episode_steps",
            "simulated_time",
            "triggers",
            "switches",
            "planner_calls",
            "reason",
            "final_node",
        ]


class TestSubgoalGate:
    """Tests for edges whose program runs out before the target sub-goal holds."""

    def test_exhausted_edge_runs_again(self, new_world: Callable[[], WorldState]) -> None:
        """Test that a short lift is repeated until the bottle is high enough."""
        graph = build_graph(_raise_task(0.25))
        result, trace = run_episode(graph, new_world(), "recovery", CONFIG, rng=0, trace=Trace())
        assert result.success
        assert (result.triggers, result.switches) == (0, 1)
        (switch,) = [e.payload for e in trace.of_kind("edge_switch")]
        assert (switch["from"], switch["to"], switch["failure"]) == ("lift", "lift", SUBGOAL_UNMET)
        completed = [e.payload["node"] for e in trace.of_kind("node_complete")]
        assert completed == ["grasped", "lifted"]

    def test_open_loop_advances(self, new_world: Callable[[], WorldState]) -> None:
        """Test that without monitors the short lift ends the episode unfinished."""
        graph = build_graph(_raise_task(0.25))
        result, trace = run_episode(graph, new_world(), "none", CONFIG, rng=0, trace=Trace())
        assert not result.success
        assert result.reason == "terminal-constraints-unmet"
        assert trace.of_kind("edge_switch") == []

    def test_reruns_are_capped(self, new_world: Callable[[], WorldState]) -> None:
        """Test that a target out of reach of repeated runs ends at the consecutive cap."""
        graph = build_graph(_raise_task(0.55))
        result, _ = run_episode(graph, new_world(), "recovery", CONFIG, rng=0)
        assert not result.success
        assert result.reason == "RecoveryLoopCap"
        assert result.switches == CONFIG.executor.consecutive_cap

    def test_backtrack_restarts_from_keyframe(self, new_world: Callable[[], WorldState]) -> None:
        """Test that backtracking returns to the source keyframe before running again."""
        graph = build_graph(_raise_task(0.25))
        _, trace = run_episode(graph, new_world(), "backtrack", CONFIG, rng=0, trace=Trace())
        first = trace.of_kind("edge_switch")[0].payload
        assert (first["node"], first["to"], first["failure"]) == ("grasped", "lift", SUBGOAL_UNMET)


class TestRecoveryEdgeMonitors:
    """Tests for failure modes declared on recovery edges."""

    @pytest.fixture
    def raise_graph(self) -> AugmentedGraph:
        doc = _raise_task(0.25)
        return augment(build_graph(doc), doc["recovery"])

    def test_drop_during_regrasp_retries(
        self, raise_graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that a drop while regrasping triggers and runs the regrasp again."""
        result, trace = run_episode(
            raise_graph,
            new_world(),
            "recovery",
            CONFIG,
            rng=0,
            disturbance=_drops(1, 3),
            trace=Trace(),
        )
        assert result.success
        assert (result.triggers, result.switches) == (2, 2)
        switches = [(e.payload["from"], e.payload["to"]) for e in trace.of_kind("edge_switch")]
        assert switches == [("lift", "regrasp"), ("regrasp", "regrasp")]
        evals = {e.payload["edge"] for e in trace.of_kind("monitor_eval")}
        assert evals == {"lift", "regrasp"}
        assert _assert_switch_on_kth_violation(trace) == 2

    def test_repeated_regrasp_failure_hits_cap(
        self, raise_graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that a regrasp failing over and over ends at the consecutive cap."""
        drops = _drops(1, 3, 5, 7, 9)
        result, _ = run_episode(
            raise_graph, new_world(), "recovery", CONFIG, rng=0, disturbance=drops
        )
        assert not result.success
        assert result.reason == "RecoveryLoopCap"
        assert result.triggers == 5
        assert result.switches == 1 + CONFIG.executor.consecutive_cap

    def test_unmonitored_without_failure_modes(
        self, graph: AugmentedGraph, new_world: Callable[[], WorldState]
    ) -> None:
        """Test that a recovery edge without failure modes evaluates no monitor."""
        _, trace = run_episode(
            graph,
            new_world(),
            "recovery",
            CONFIG,
            rng=0,
            disturbance=DROP_DURING_LIFT,
            trace=Trace(),
        )
        assert {e.payload["edge"] for e in trace.of_kind("monitor_eval")} == {"lift"}


@pytest.mark.acceptance
class TestShippedTaskAcceptance:
    """Seed sweeps over the shipped tasks; deselected by default."""

    def test_trigger_latency_over_seeds(self) -> None:
        """Test the switch step of every trigger over 100 seeds with one scheduled drop."""
        spec = stub_planner("single-arm pour water")
        triggered = 0
        for seed in range(100):
            _, trace = simulate(spec, "recovery", seed=seed, p=0.0, scheduled_events=1)
            triggered += _assert_switch_on_kth_violation(trace) > 0
        assert triggered >= 50

    def test_no_false_trigger(self) -> None:
        """Test zero triggers over 100 disturbance-free episodes of the shipped tasks."""
        names = sorted(SHIPPED_TASKS)
        for seed in range(100):
            spec = stub_planner(names[seed % len(names)])
            result, _ = simulate(spec, "recovery", seed=seed, p=0.0, record=False)
            assert result.triggers == 0, (spec.name, seed)


@pytest.mark.parametrize("name", ["single-arm pour water", "dual-arm pour water"])
def test_disturbance_free_pour_has_no_trigger(name: str) -> None:
    """Test that an undisturbed shipped pour completes without a monitor firing."""
    result, _ = simulate(stub_planner(name), "recovery", seed=0, p=0.0, record=False)
    assert result.success
    assert result.triggers == 0
