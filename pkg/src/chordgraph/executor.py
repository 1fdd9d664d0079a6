# src/chordgraph/executor.py
"""Graph traversal: run edge programs in chunks, watch monitors, switch on triggers.

Three strategies share the loop. ``recovery`` follows the pre-compiled recovery edge of
the failure mode that fired; ``backtrack`` ignores recovery edges, resets the arms to an
earlier keyframe and replays the nominal path; ``none`` runs open loop with monitors off.

Under the monitored strategies a node is only entered once its sub-goal holds. An edge
whose program runs out first is run again, and those re-runs count against the same
caps as triggers.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
import logging
from pathlib import Path
from typing import Any, Iterator, Mapping

import numpy as np

from chordgraph.actions import DriveAction, MoveToTargetAction, SolverProgram
from chordgraph.config import ResolvedConfig
from chordgraph.detectors import required_keys
from chordgraph.exceptions import (
    DeadEnd,
    EpisodeAbort,
    InfeasibleError,
    MissingFeatureError,
    RecoveryLoopCap,
)
from chordgraph.features import FeatureVector, extract_features, perceive
from chordgraph.geometry import Pose
from chordgraph.graph import Edge, Node, TaskGraph, dist_to, outgoing, recovery_target
from chordgraph.monitors import (
    MonitorState,
    compile_edge_monitors,
    subgoal_satisfied,
    update_monitor,
)
from chordgraph.simworld import (
    ActionRun,
    DisturbanceModel,
    StepOutcome,
    WorldEvent,
    WorldState,
    check_success,
)
from chordgraph.skills import SkillContext
from chordgraph.solvers import CollisionField, SceneEstimate, build_collision_field
from chordgraph.utils import canonical_json

logger = logging.getLogger(__name__)

EVENT_KINDS = (
    "command",
    "monitor_eval",
    "trigger",
    "edge_switch",
    "node_complete",
    "disturbance",
    "planner_call",
    "terminal",
)

STREAMS = ("perception", "disturbance", "solver", "randomization")

TERMINAL_UNMET = "terminal-constraints-unmet"
SOLVER_INFEASIBLE = "SolverInfeasible"
SUBGOAL_UNMET = "subgoal-unmet"
CONFIRM_SAMPLES = 3

STRATEGY_ALIASES = {"agentchord": "recovery"}
"""Other names accepted on input; output always uses the canonical value."""


class Strategy(str, Enum):
    RECOVERY = "recovery"
    BACKTRACK = "backtrack"
    NONE = "none"

    @classmethod
    def _missing_(cls, value: object) -> "Strategy | None":
        if isinstance(value, str) and value.lower() in STRATEGY_ALIASES:
            return cls(STRATEGY_ALIASES[value.lower()])
        return None

    @classmethod
    def choices(cls) -> list[str]:
        """Accepted spellings: every value plus its aliases."""
        return [s.value for s in cls] + sorted(STRATEGY_ALIASES)

    @property
    def monitored(self) -> bool:
        return self is not Strategy.NONE

    @property
    def planner_stages(self) -> tuple[str, ...]:
        """Planner invocations charged up front; only ``recovery`` orchestrates branches."""
        if self is Strategy.RECOVERY:
            return ("structure", "orchestrate", "compile-hints")
        return ("structure", "compile-hints")


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for every random stream of one trial."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceEvent:
    step: int
    kind: str
    payload: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"step": self.step, "kind": self.kind, "payload": dict(self.payload)}


class Trace:
    """Ordered episode events; serialized as JSON lines after a header record."""

    def __init__(self, header: Mapping[str, Any] | None = None):
        self.header: dict[str, Any] = dict(header or {})
        self.events: list[TraceEvent] = []

    def emit(self, step: int, kind: str, **payload: Any) -> None:
        if kind not in EVENT_KINDS:
            raise ValueError(f"Unknown trace event kind {kind!r}")
        if self.events and step < self.events[-1].step:
            previous = self.events[-1].step
            raise ValueError(f"Trace steps must be nondecreasing ({step} after {previous})")
        self.events.append(TraceEvent(step, kind, payload))

    def of_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    def lines(self) -> Iterator[str]:
        yield canonical_json({"header": self.header})
        for event in self.events:
            yield canonical_json(event.to_dict())

    def to_jsonl(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path: str | Path) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(self.to_jsonl(), encoding="utf-8")
        return target


class NullTrace(Trace):
    """Discards events; used when no trace output is requested."""

    def emit(self, step: int, kind: str, **payload: Any) -> None:
        return None


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    episode_steps: int
    simulated_time: float
    triggers: int = 0
    switches: int = 0
    planner_calls: int = 0
    reason: str = ""
    final_node: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "success": self.success,
            "episode_steps": self.episode_steps,
            "simulated_time": self.simulated_time,
            "triggers": self.triggers,
            "switches": self.switches,
            "planner_calls": self.planner_calls,
            "reason": self.reason,
            "final_node": self.final_node,
        }


class ChunkStatus(str, Enum):
    CHUNK = "chunk"
    TRIGGER = "trigger"
    REACHED = "reached"
    EXHAUSTED = "exhausted"


@dataclass(frozen=True)
class ChunkResult:
    status: ChunkStatus
    steps: int
    failure_id: str | None = None


# ---------------------------------------------------------------------------
# Edge selection and chunked execution
# ---------------------------------------------------------------------------


def select_edge(graph: TaskGraph, node: str, pending: str | None = None) -> Edge:
    """The edge to run from ``node``: the pending recovery edge, else the first nominal one.

    Raises:
        DeadEnd: ``node`` is not terminal and has no outgoing edge.
    """
    if pending is not None:
        return graph.edge(pending)
    candidates = outgoing(graph, node)
    if not candidates:
        raise DeadEnd(f"Node {node!r} has no outgoing edge")
    return candidates[0]


def _program_actions(program: Any) -> tuple[Any, ...]:
    if isinstance(program, SolverProgram):
        return (program.solver,)
    return tuple(program)


class EdgeRun:
    """Execution state of one edge: the remaining actions and the compiled monitors."""

    def __init__(self, episode: "Episode", edge: Edge, monitors: list[MonitorState]):
        self.episode = episode
        self.edge = edge
        self.monitors = monitors
        self.target: Node = episode.graph.nodes[edge.target]
        self.keys = sorted(
            required_keys([m.detector for m in monitors] + list(self.target.sub_goals))
        )
        self._actions = iter(_program_actions(edge.program))
        self._current: ActionRun | None = None

    def next_step(self) -> StepOutcome | None:
        """Execute one control step of the program; ``None`` once every action is done."""
        while True:
            if self._current is None:
                action = next(self._actions, None)
                if action is None:
                    return None
                self._current = self.episode.start_action(
                    action, self.target, self.edge.path_constraints
                )
            outcome = self._current.step()
            if outcome is not None:
                return outcome
            self.episode.record_events(self._current.late_events)
            self._current = None

    def update_monitors(self, z: FeatureVector) -> str | None:
        """Push one sample into every monitor; the first failure id that fires, if any."""
        fired: str | None = None
        step = self.episode.world.step
        for state in self.monitors:
            value = state.observe(z)
            if value is None:
                continue
            triggered = update_monitor(state, value)
            self.episode.trace.emit(
                step,
                "monitor_eval",
                edge=self.edge.id,
                failure=state.failure_id,
                value=value,
                violated=value > state.epsilon,
            )
            if triggered and fired is None:
                fired = state.failure_id
        return fired

    def reached(self, z: FeatureVector) -> bool:
        try:
            return subgoal_satisfied(self.target, z, self.episode.config.executor.subgoal_tol)
        except MissingFeatureError:
            return False


def run_chunk(run: EdgeRun, limit: int) -> ChunkResult:
    """Execute up to ``limit`` control steps, sensing and updating monitors after each.

    Returns on the first trigger or on sub-goal satisfaction without executing further
    commands.
    """
    episode = run.episode
    for executed in range(limit):
        outcome = run.next_step()
        if outcome is None:
            return ChunkResult(ChunkStatus.EXHAUSTED, executed)
        episode.record_step(outcome)
        z = episode.sense(run.keys)
        failure = run.update_monitors(z)
        if failure is not None:
            return ChunkResult(ChunkStatus.TRIGGER, executed + 1, failure)
        if run.reached(z):
            return ChunkResult(ChunkStatus.REACHED, executed + 1)
    return ChunkResult(ChunkStatus.CHUNK, limit)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


class Episode:
    """One traversal of a task graph in one world."""

    def __init__(
        self,
        graph: TaskGraph,
        world: WorldState,
        strategy: Strategy,
        config: ResolvedConfig,
        rngs: Mapping[str, np.random.Generator],
        disturbance: DisturbanceModel,
        trace: Trace,
        field_: CollisionField | None = None,
    ):
        if field_ is None:
            if world.scene is None:
                raise ValueError("World carries no scene; pass a collision field explicitly")
            field_ = build_collision_field(world.scene, config.solver)
        self.graph = graph
        self.world = world
        self.strategy = strategy
        self.config = config
        self.rngs = rngs
        self.disturbance = disturbance
        self.trace = trace
        self.ctx = SkillContext(
            workspace=world.workspace,
            field=field_,
            config=config.solver,
            rng=rngs["solver"],
            estimate=self.estimate,
        )
        self.start_step = world.step
        self.max_step = world.step + config.executor.step_budget
        self.remaining = dist_to(graph, graph.terminal)
        self.keyframes: dict[str, dict[str, Pose]] = {}
        self.node = graph.start
        self.action_index = 0
        self.triggers = 0
        self.switches = 0
        self.planner_calls = 0
        self.consecutive: Counter[str] = Counter()

    # -- sensing -------------------------------------------------------------

    def estimate(self, world: WorldState) -> SceneEstimate:
        perception = perceive(world, self.config.noise, self.rngs["perception"])
        return SceneEstimate(perception, world.robot_state(), world.carried())

    def sense(self, keys: list[str] | set[str]) -> FeatureVector:
        perception = perceive(self.world, self.config.noise, self.rngs["perception"])
        return extract_features(perception, self.world.robot_state(), keys)

    # -- recording -----------------------------------------------------------

    def record_step(self, outcome: StepOutcome) -> None:
        commands = {
            arm: {"pose": cmd.pose.to_dict(), "width": cmd.width}
            for arm, cmd in sorted(outcome.command.items())
        }
        step = self.world.step
        events = [e.tag for e in outcome.events if not e.disturbance]
        self.trace.emit(step, "command", arms=commands, events=events)
        self.record_events(outcome.events)

    def record_events(self, events: list[WorldEvent]) -> None:
        for event in events:
            if event.disturbance:
                payload = event.to_dict()
                del payload["step"]
                payload["event"] = payload.pop("kind")
                self.trace.emit(self.world.step, "disturbance", **payload)

    def start_action(
        self, action: Any, node: Node, path_constraints: tuple[Any, ...]
    ) -> ActionRun:
        run = ActionRun(
            self.world,
            action,
            self.ctx,
            disturbance=self.disturbance,
            rng=self.rngs["disturbance"],
            action_index=self.action_index,
            node=node,
            path_constraints=path_constraints,
            max_step=self.max_step,
        )
        self.action_index += 1
        return run

    def _snapshot(self) -> dict[str, Pose]:
        return {arm: g.pose for arm, g in sorted(self.world.grippers.items())}

    # -- traversal -----------------------------------------------------------

    def run(self) -> EpisodeResult:
        reason = ""
        try:
            for stage in self.strategy.planner_stages:
                self.planner_calls += 1
                self.trace.emit(
                    self.world.step,
                    "planner_call",
                    stage=stage,
                    latency=self.config.executor.planner_latency,
                )
            self._traverse()
            success = check_success(self.world, self.graph.nodes[self.graph.terminal])
            if not success:
                reason = TERMINAL_UNMET
        except EpisodeAbort as exc:
            success, reason = False, exc.reason
            logger.info("Episode aborted at node %s: %s", self.node, exc)
        except InfeasibleError as exc:
            success, reason = False, SOLVER_INFEASIBLE
            logger.info("Episode failed at node %s: %s", self.node, exc)

        steps = self.world.step - self.start_step
        executor = self.config.executor
        result = EpisodeResult(
            success=success,
            episode_steps=steps,
            simulated_time=steps * executor.dt + self.planner_calls * executor.planner_latency,
            triggers=self.triggers,
            switches=self.switches,
            planner_calls=self.planner_calls,
            reason=reason,
            final_node=self.node,
        )
        self.trace.emit(self.world.step, "terminal", **result.to_dict())
        return result

    def _traverse(self) -> None:
        graph = self.graph
        self.keyframes[graph.start] = self._snapshot()
        pending: str | None = None
        while self.node != graph.terminal:
            edge = select_edge(graph, self.node, pending)
            pending = None
            result = self._run_edge(edge)
            if result.status is ChunkStatus.TRIGGER:
                pending = self._on_trigger(edge, result.failure_id or "")
            elif result.status is ChunkStatus.EXHAUSTED and self._unmet(edge):
                pending = self._on_unmet(edge)
            else:
                self._complete(edge, result.status)

    def _run_edge(self, edge: Edge) -> ChunkResult:
        monitors: list[MonitorState] = []
        if self.strategy.monitored and edge.failure_modes:
            detectors = [mode.detector for mode in edge.failure_modes]
            monitors = compile_edge_monitors(edge, self.sense(required_keys(detectors)))
        run = EdgeRun(self, edge, monitors)
        limit = self.config.solver.execute
        while True:
            result = run_chunk(run, limit)
            if result.status is not ChunkStatus.CHUNK:
                return result

    def _unmet(self, edge: Edge) -> bool:
        """Whether the target sub-goal still fails after the edge program ran out.

        Open-loop runs advance regardless. Fresh samples keep one noisy reading from
        forcing a re-run.
        """
        if not self.strategy.monitored:
            return False
        target = self.graph.nodes[edge.target]
        keys = required_keys(list(target.sub_goals))
        tol = self.config.executor.subgoal_tol
        for _ in range(CONFIRM_SAMPLES):
            try:
                if subgoal_satisfied(target, self.sense(keys), tol):
                    return False
            except MissingFeatureError:
                continue
        return True

    def _complete(self, edge: Edge, status: ChunkStatus) -> None:
        self.consecutive.pop(edge.id, None)
        self.node = edge.target
        self.keyframes[edge.target] = self._snapshot()
        self.trace.emit(
            self.world.step,
            "node_complete",
            node=edge.target,
            edge=edge.id,
            status=status.value,
            dist=self.remaining.get(edge.target),
        )

    def _count_switch(self, edge: Edge) -> None:
        self.consecutive[edge.id] += 1
        limits = self.config.executor
        if self.consecutive[edge.id] > limits.consecutive_cap:
            raise RecoveryLoopCap(
                f"Edge {edge.id} failed {self.consecutive[edge.id]} times without completing"
            )
        if self.switches >= limits.switch_cap:
            raise RecoveryLoopCap(f"Recovery switch cap of {limits.switch_cap} reached")
        self.switches += 1

    def _on_trigger(self, edge: Edge, failure_id: str) -> str | None:
        step = self.world.step
        self.triggers += 1
        self.trace.emit(step, "trigger", edge=edge.id, failure=failure_id)
        self._count_switch(edge)

        if self.strategy is Strategy.RECOVERY:
            target = recovery_target(edge, failure_id)
            self.trace.emit(step, "edge_switch", failure=failure_id, to=target, **{"from": edge.id})
            self.node = edge.source
            return target
        self._backtrack(edge, failure_id)
        return None

    def _on_unmet(self, edge: Edge) -> str | None:
        """Run ``edge`` again; backtracking restarts it from its source keyframe."""
        logger.info(
            "Edge %s exhausted its program before %s was satisfied", edge.id, edge.target
        )
        self._count_switch(edge)
        if self.strategy is Strategy.BACKTRACK:
            self._backtrack(edge, SUBGOAL_UNMET)
            return None
        self.trace.emit(
            self.world.step, "edge_switch", failure=SUBGOAL_UNMET, to=edge.id, **{"from": edge.id}
        )
        self.node = edge.source
        return edge.id

    # -- backtracking --------------------------------------------------------

    def _backtrack(self, edge: Edge, failure_id: str) -> None:
        node = self._backtrack_node(edge)
        replay = select_edge(self.graph, node)
        self.trace.emit(
            self.world.step,
            "edge_switch",
            failure=failure_id,
            to=replay.id,
            node=node,
            **{"from": edge.id},
        )
        self._reset_to(node)
        self.node = node

    def _backtrack_node(self, edge: Edge) -> str:
        """The node whose keyframe the arms return to before the nominal path is replayed.

        The first failure restarts the failing edge from its source. Every further
        consecutive failure of the same edge regresses one node along the nominal path.
        """
        path = self.graph.nominal_path()
        if edge.source not in path:
            return edge.source
        index = path.index(edge.source) - (self.consecutive[edge.id] - 1)
        return path[max(0, index)]

    def _reset_to(self, node: str) -> None:
        keyframe = self.keyframes.get(node) or self.keyframes[self.graph.start]
        moves = {
            arm: MoveToTargetAction(
                robot=arm,
                x=pose.position[0],
                y=pose.position[1],
                z=pose.position[2],
                quat=pose.quat,
            )
            for arm, pose in keyframe.items()
        }
        action = DriveAction(left=moves.get("left"), right=moves.get("right"))
        run = self.start_action(action, self.graph.nodes[node], ())
        while (outcome := run.step()) is not None:
            self.record_step(outcome)
        self.record_events(run.late_events)


def run_episode(
    graph: TaskGraph,
    world: WorldState,
    strategy: Strategy | str,
    config: ResolvedConfig | None = None,
    rng: int | Mapping[str, np.random.Generator] = 0,
    *,
    disturbance: DisturbanceModel | None = None,
    trace: Trace | None = None,
    field_: CollisionField | None = None,
) -> tuple[EpisodeResult, Trace]:
    """Traverse ``graph`` from start to terminal in ``world``.

    ``rng`` is either a trial seed, from which every stream is spawned, or a mapping of
    ready-made generators keyed by stream name. Episode-terminating errors become a
    failed result with a reason; the trace ends with a ``terminal`` event.

    Raises:
        UnknownObjectError: the graph references an object that is not in the world.
    """
    strategy = Strategy(strategy)
    config = config or ResolvedConfig()
    rngs = spawn_streams(rng) if isinstance(rng, int) else rng
    if trace is None:
        trace = NullTrace()
    if not trace.header:
        trace.header = {
            "task": graph.name,
            "strategy": strategy.value,
            "seed": rng if isinstance(rng, int) else None,
            "config": config.model_dump(mode="json"),
        }
    episode = Episode(
        graph,
        world,
        strategy,
        config,
        rngs,
        disturbance or DisturbanceModel(),
        trace,
        field_,
    )
    result = episode.run()
    logger.info(
        "Episode %s/%s: success=%s steps=%d triggers=%d",
        graph.name,
        strategy.value,
        result.success,
        result.episode_steps,
        result.triggers,
    )
    return result, trace
