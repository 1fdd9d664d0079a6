# tests/test_monitors.py
from __future__ import annotations

import numpy as np
import pytest

from chordgraph.detectors import (
    AttachTemplate,
    ExprTemplate,
    ShiftTemplate,
    VisibilityTemplate,
)
from chordgraph.features import FeatureVector
from chordgraph.graph import Edge, FailureMode, Node
from chordgraph.monitors import (
    MonitorState,
    compile_edge_monitors,
    subgoal_satisfied,
    subgoal_values,
    update_monitor,
)


def _reference_triggers(values: list[float], epsilon: float, k: int) -> list[bool]:
    """Brute force: trigger when the last k samples since the previous trigger all violate."""
    triggers = []
    since_reset: list[bool] = []
    for value in values:
        since_reset.append(value > epsilon)
        fired = len(since_reset) >= k and all(since_reset[-k:])
        triggers.append(fired)
        if fired:
            since_reset = []
    return triggers


class TestUpdateMonitor:
    """Tests for the persistence trigger."""

    def test_triggers_on_kth_consecutive_violation(self) -> None:
        """Test that exactly the K-th consecutive violation fires."""
        state = MonitorState("drop", detector=None, epsilon=0.0, k=3)
        assert [update_monitor(state, v) for v in (1.0, 1.0, 1.0)] == [False, False, True]

    def test_normal_sample_breaks_the_run(self) -> None:
        """Test that a non-violating sample restarts the count."""
        state = MonitorState("drop", detector=None, epsilon=0.0, k=3)
        fired = [update_monitor(state, v) for v in (1.0, 1.0, -1.0, 1.0, 1.0, 1.0)]
        assert fired == [False, False, False, False, False, True]

    def test_epsilon_is_strict(self) -> None:
        """Test that a value equal to epsilon is not a violation."""
        state = MonitorState("drop", detector=None, epsilon=0.5, k=1)
        assert update_monitor(state, 0.5) is False
        assert update_monitor(state, 0.5001) is True

    def test_resets_after_trigger(self) -> None:
        """Test that the buffer empties after a trigger."""
        state = MonitorState("drop", detector=None, epsilon=0.0, k=2)
        assert [update_monitor(state, 1.0) for _ in range(4)] == [False, True, False, True]
        assert state.samples == 0

    def test_invalid_window(self) -> None:
        """Test that a persistence window below one is rejected."""
        with pytest.raises(ValueError):
            MonitorState("drop", detector=None, epsilon=0.0, k=0)

    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_matches_brute_force_on_random_sequences(self, k: int) -> None:
        """Test the trigger against a brute-force window over random sequences."""
        rng = np.random.default_rng(k)
        for _ in range(200):
            values = list(rng.choice([-1.0, 0.0, 0.05, 1.0], size=int(rng.integers(1, 30))))
            state = MonitorState("m", detector=None, epsilon=0.01, k=k)
            fired = [update_monitor(state, float(v)) for v in values]
            assert fired == _reference_triggers([float(v) for v in values], 0.01, k)

    def test_random_windows_and_margins(self) -> None:
        """Test a reduced sweep over persistence windows and both margins."""
        assert _sweep(np.random.default_rng(5), 500) == 0


def _sweep(rng: np.random.Generator, count: int) -> int:
    """Mismatches between update_monitor and the reference over ``count`` sequences."""
    mismatches = 0
    for _ in range(count):
        epsilon = float(rng.choice([0.0, 0.05]))
        k = int(rng.integers(1, 11))
        values = [float(v) for v in rng.choice([-1.0, 0.0, 0.05, 0.06, 1.0], size=100)]
        values = values[: int(rng.integers(1, 101))]
        state = MonitorState("m", detector=None, epsilon=epsilon, k=k)
        fired = [update_monitor(state, v) for v in values]
        mismatches += fired != _reference_triggers(values, epsilon, k)
    return mismatches


@pytest.mark.acceptance
def test_monitor_matches_reference_on_ten_thousand_sequences() -> None:
    """Test that no random sequence disagrees with the brute-force first-K scan."""
    assert _sweep(np.random.default_rng(2024), 10_000) == 0


class TestMonitorState:
    """Tests for detector evaluation inside a monitor."""

    def test_shift_snapshots_reference_first(self) -> None:
        """Test that a shift detector records its reference before sampling."""
        state = MonitorState("shifted", ShiftTemplate(object="cup", delta_shift=0.05), 0.0, 1)
        start = FeatureVector(values={"centroid(cup)": np.array([0.4, 0.1, 0.05])})
        moved = FeatureVector(values={"centroid(cup)": np.array([0.5, 0.1, 0.05])})
        assert state.observe(start) is None
        assert state.detector.reference == (0.4, 0.1, 0.05)
        assert state.observe(moved) == pytest.approx(0.05)

    def test_missing_feature_counts_as_normal(self) -> None:
        """Test that a missing feature never pushes a violation."""
        detector = AttachTemplate(object="bottle", arm="left", delta_attach=0.05)
        state = MonitorState("dropped", detector, 0.0, 1)
        value = state.observe(FeatureVector(missing=frozenset({"centroid(bottle)"})))
        assert value == float("-inf")
        assert update_monitor(state, value) is False

    def test_visibility_handles_missing_itself(self) -> None:
        """Test that the visibility template turns an absent cloud into a violation."""
        state = MonitorState("lost", VisibilityTemplate(object="cup", n_min=10), 0.0, 1)
        assert state.observe(FeatureVector(missing=frozenset({"point_count(cup)"}))) == 10.0


class TestCompileEdgeMonitors:
    """Tests for compile_edge_monitors()."""

    def test_fresh_states_in_declaration_order(self) -> None:
        """Test that every failure mode gets its own empty buffer."""
        edge = Edge(
            id="transport",
            source="grasped",
            target="at_cup",
            failure_modes=(
                FailureMode(
                    "bottle_dropped", "transport", VisibilityTemplate(object="bottle", n_min=5)
                ),
                FailureMode(
                    "cup_shifted",
                    "transport",
                    ShiftTemplate(object="cup", delta_shift=0.05),
                    margin_epsilon=0.01,
                    persistence_k=4,
                ),
            ),
        )
        entry = FeatureVector(values={"centroid(cup)": np.array([0.45, 0.1, 0.05])})
        states = compile_edge_monitors(edge, entry)
        assert [s.failure_id for s in states] == ["bottle_dropped", "cup_shifted"]
        assert states[1].k == 4
        assert states[1].epsilon == 0.01
        assert states[1].detector.reference == (0.45, 0.1, 0.05)
        assert all(s.samples == 0 for s in states)

    def test_edge_without_failure_modes(self) -> None:
        """Test that an unmonitored edge yields no states."""
        assert compile_edge_monitors(Edge(id="e", source="a", target="b")) == []


class TestSubgoals:
    """Tests for subgoal_satisfied()."""

    def test_all_constraints_must_hold(self) -> None:
        """Test conjunction of sub-goal constraints with a tolerance."""
        node = Node(
            id="grasped",
            sub_goals=(
                ExprTemplate(expr="0.02 - gripper_width(left)"),
                ExprTemplate(expr="gripper_width(left) - 0.05"),
            ),
        )
        inside = FeatureVector(values={"gripper_width(left)": 0.03})
        outside = FeatureVector(values={"gripper_width(left)": 0.019})
        assert subgoal_satisfied(node, inside)
        assert not subgoal_satisfied(node, outside)
        assert subgoal_satisfied(node, outside, tol=0.01)
        assert subgoal_values(node.sub_goals, inside) == pytest.approx([-0.01, -0.02])

    def test_node_without_constraints(self) -> None:
        """Test that an unconstrained node is trivially satisfied."""
        assert subgoal_satisfied(Node(id="start"), FeatureVector())
