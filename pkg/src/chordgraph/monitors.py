# src/chordgraph/monitors.py
"""Compiled failure monitors with the (epsilon, K) persistence trigger."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
import logging
from typing import TYPE_CHECKING, Any, Iterable

import numpy as np

from chordgraph.detectors import ShiftTemplate, eval_detector
from chordgraph.exceptions import MissingFeatureError
from chordgraph.features import FeatureVector

if TYPE_CHECKING:
    from chordgraph.graph import Edge, Node

logger = logging.getLogger(__name__)


@dataclass
class MonitorState:
    """Trigger buffer of one failure mode on the active edge.

    The buffer holds the last ``k`` violation flags; ``samples`` counts updates since
    the last reset so a buffer can never trigger on stale flags.
    """

    failure_id: str
    detector: Any
    epsilon: float
    k: int
    buffer: deque[bool] = field(init=False)
    samples: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"persistence window must be >= 1, got {self.k}")
        self.buffer = deque(maxlen=self.k)

    def reset(self) -> None:
        self.buffer.clear()
        self.samples = 0

    def observe(self, z: FeatureVector) -> float | None:
        """Evaluate the detector on ``z``.

        Returns ``None`` when no sample should be pushed: a Shift reference was just
        snapshotted. Missing features count as a normal sample; tracking loss is the
        visibility template's job.
        """
        if isinstance(self.detector, ShiftTemplate) and self.detector.reference is None:
            try:
                position = np.asarray(z[f"centroid({self.detector.object})"], dtype=float)
            except MissingFeatureError:
                return None
            self.detector = self.detector.model_copy(
                update={"reference": tuple(float(v) for v in position)}
            )
            return None
        try:
            return eval_detector(self.detector, z)
        except MissingFeatureError as exc:
            logger.debug("Monitor %s: %s; counted as normal", self.failure_id, exc)
            return float("-inf")


def update_monitor(state: MonitorState, f_value: float) -> bool:
    """Push ``f_value > epsilon`` and report whether the last K flags are all violations.

    The state resets after a trigger.
    """
    state.buffer.append(f_value > state.epsilon)
    state.samples += 1
    triggered = state.samples >= state.k and len(state.buffer) == state.k and all(state.buffer)
    if triggered:
        state.reset()
    return triggered


def subgoal_satisfied(node: "Node", z: FeatureVector, tol: float = 0.0) -> bool:
    """True iff every sub-goal constraint of ``node`` evaluates ``<= tol``.

    Raises:
        MissingFeatureError: a constraint needs an absent feature.
    """
    return all(eval_detector(c, z) <= tol for c in node.sub_goals)


def subgoal_values(constraints: Iterable[Any], z: FeatureVector) -> list[float]:
    return [eval_detector(c, z) for c in constraints]


def compile_edge_monitors(
    edge: "Edge", entry: FeatureVector | None = None
) -> list[MonitorState]:
    """Fresh monitor states for every failure mode of ``edge``, in declaration order.

    Shift detectors without an explicit reference snapshot it from ``entry`` when given,
    otherwise from the first sample they observe.
    """
    states = [
        MonitorState(
            failure_id=mode.id,
            detector=mode.detector,
            epsilon=mode.margin_epsilon,
            k=mode.persistence_k,
        )
        for mode in edge.failure_modes
    ]
    if entry is not None:
        for state in states:
            if isinstance(state.detector, ShiftTemplate) and state.detector.reference is None:
                state.observe(entry)
    return states
