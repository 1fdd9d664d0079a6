# src/chordgraph/graph.py
"""Task graphs, recovery augmentation and the forward-moving filter.

A :class:`TaskGraph` holds sub-goal nodes and motion-transition edges. :func:`augment`
adds pre-compiled recovery branches for anticipated failure modes, and
:func:`filter_forward_moving` drops every branch that would increase the shortest-path
cost-to-go to the terminal node.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
import logging
import math
from typing import Any, Iterable, Mapping, Sequence

import networkx as nx
from pydantic import ValidationError

from chordgraph.config import MonitorDefaults
from chordgraph.exceptions import (
    DanglingReferenceError,
    MergeTargetMissingError,
    NoTerminalError,
    SchemaViolation,
    TerminalUnreachableError,
    UnknownFailureModeError,
    UnknownNominalEdgeError,
)
from chordgraph.schema import (
    EdgeDoc,
    GraphDocument,
    GripperIntentDoc,
    NodeDoc,
    Program,
    RecoveryDoc,
    RecoveryEdgeDoc,
    TaskDocument,
    planned_steps,
)
from chordgraph.utils import canonical_json, validation_error_keys

logger = logging.getLogger(__name__)

UNREACHABLE = math.inf
"""Value returned by :func:`dist` when no directed path exists."""

_TIE_TOL = 1e-12


@dataclass(frozen=True)
class Node:
    id: str
    kind: str = "nominal"
    sub_goals: tuple[Any, ...] = ()
    gripper_intent: Mapping[str, GripperIntentDoc] = field(default_factory=dict)
    required_events: tuple[str, ...] = ()


@dataclass(frozen=True)
class FailureMode:
    id: str
    edge: str
    detector: Any
    margin_epsilon: float = 0.0
    persistence_k: int = 3
    recovery_edge: str | None = None


@dataclass(frozen=True)
class Edge:
    id: str
    source: str
    target: str
    program: Program = ()  # type: ignore[assignment]
    path_constraints: tuple[Any, ...] = ()
    failure_modes: tuple[FailureMode, ...] = ()
    weight: float = 0.0
    recovery: bool = False
    intent: str = ""

    def failure_mode(self, failure_id: str) -> FailureMode:
        for mode in self.failure_modes:
            if mode.id == failure_id:
                return mode
        raise UnknownFailureModeError(f"Edge {self.id!r} has no failure mode {failure_id!r}")


@dataclass(frozen=True)
class Rejection:
    """A recovery branch removed by the forward-moving filter."""

    failure_mode: str
    edge: str
    recovery_edge: str
    recovery_node: str
    dist_recovery: float
    dist_failure: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "failure_mode": self.failure_mode,
            "edge": self.edge,
            "recovery_edge": self.recovery_edge,
            "recovery_node": self.recovery_node,
            "dist_recovery": _json_dist(self.dist_recovery),
            "dist_failure": _json_dist(self.dist_failure),
        }


def _json_dist(value: float) -> float | str:
    return "unreachable" if math.isinf(value) else value


@dataclass(frozen=True)
class TaskGraph:
    nodes: Mapping[str, Node]
    edges: Mapping[str, Edge]
    start: str
    terminal: str
    name: str = ""
    monitor_defaults: MonitorDefaults = MonitorDefaults()

    @cached_property
    def digraph(self) -> nx.DiGraph:
        """Weighted view; parallel edges collapse to their cheapest weight."""
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        for edge in self.edges.values():
            current = g.get_edge_data(edge.source, edge.target)
            if current is None or edge.weight < current["weight"]:
                g.add_edge(edge.source, edge.target, weight=edge.weight)
        return g

    @property
    def nominal_edges(self) -> list[Edge]:
        return [e for e in self.edges.values() if not e.recovery]

    @property
    def recovery_edges(self) -> list[Edge]:
        return [e for e in self.edges.values() if e.recovery]

    @property
    def recovery_nodes(self) -> list[Node]:
        return [n for n in self.nodes.values() if n.kind == "recovery"]

    def edge(self, edge_id: str) -> Edge:
        try:
            return self.edges[edge_id]
        except KeyError:
            raise DanglingReferenceError(f"Unknown edge {edge_id!r}") from None

    def nominal_path(self) -> list[str]:
        """Node ids of the cheapest nominal route from start to terminal."""
        nominal = TaskGraph(
            nodes=self.nodes,
            edges={e.id: e for e in self.nominal_edges},
            start=self.start,
            terminal=self.terminal,
        )
        return shortest_path(nominal, self.start, self.terminal) or [self.start]


@dataclass(frozen=True)
class AugmentedGraph(TaskGraph):
    base: TaskGraph | None = None
    merge_candidates: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    recovery_spec: tuple[RecoveryDoc, ...] = ()
    rejections: tuple[Rejection, ...] = ()

    def rejection_report(self) -> dict[str, Any]:
        return {
            "task": self.name,
            "retained": sorted(m.id for e in self.edges.values() for m in e.failure_modes),
            "rejected": [r.to_dict() for r in self.rejections],
        }


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _resolve(template: Any, defaults: MonitorDefaults) -> Any:
    return template.with_defaults(defaults)


def _node_from_doc(doc: NodeDoc, defaults: MonitorDefaults, kind: str | None = None) -> Node:
    return Node(
        id=doc.id,
        kind=kind or doc.kind,
        sub_goals=tuple(_resolve(c, defaults) for c in doc.sub_goals),
        gripper_intent=dict(sorted(doc.gripper_intent.items())),
        required_events=tuple(doc.required_events),
    )


def _program(program: Any) -> Any:
    return tuple(program) if isinstance(program, list) else program


def _edge_from_doc(
    doc: EdgeDoc | RecoveryEdgeDoc,
    source: str,
    target: str,
    defaults: MonitorDefaults,
    *,
    recovery: bool = False,
    intent: str = "",
) -> Edge:
    program = _program(doc.program)
    weight = doc.weight if doc.weight is not None else float(planned_steps(doc.program))
    return Edge(
        id=doc.id,
        source=source,
        target=target,
        program=program,
        path_constraints=tuple(_resolve(c, defaults) for c in doc.path_constraints),
        weight=float(weight),
        recovery=recovery,
        intent=intent,
    )


def _as_document(spec: Any) -> TaskDocument | GraphDocument:
    if isinstance(spec, (TaskDocument, GraphDocument)):
        return spec
    try:
        if isinstance(spec, Mapping) and "scene" in spec:
            return TaskDocument.model_validate(spec)
        return GraphDocument.model_validate(spec)
    except ValidationError as exc:
        keys = validation_error_keys(exc)
        raise SchemaViolation(f"Invalid task graph document: {exc}", keys=keys) from exc


def build_graph(spec: Any) -> TaskGraph:
    """Validate a task-graph document and build the nominal graph.

    Raises:
        DanglingReferenceError: an edge endpoint or the start node is missing.
        NoTerminalError: not exactly one terminal node, or ``terminal`` does not name it.
        TerminalUnreachableError: no nominal path from start to terminal.
        SchemaViolation: duplicate ids, nominal self-loops or recovery nodes.
    """
    doc = _as_document(spec)
    defaults = doc.monitor_defaults
    nodes: dict[str, Node] = {}
    for node_doc in doc.nodes:
        if node_doc.id in nodes:
            raise SchemaViolation(f"Duplicate node id {node_doc.id!r}", keys=["nodes"])
        if node_doc.kind == "recovery":
            raise SchemaViolation(
                f"Node {node_doc.id!r}: recovery nodes belong in the recovery section",
                keys=["nodes"],
            )
        nodes[node_doc.id] = _node_from_doc(node_doc, defaults)

    terminals = [n.id for n in nodes.values() if n.kind == "terminal"]
    if len(terminals) != 1 or terminals[0] != doc.terminal:
        raise NoTerminalError(
            f"Expected exactly one terminal node named {doc.terminal!r}, found {terminals}"
        )
    if doc.start not in nodes:
        raise DanglingReferenceError(f"Start node {doc.start!r} does not exist")

    edges: dict[str, Edge] = {}
    for edge_doc in doc.edges:
        if edge_doc.id in edges:
            raise SchemaViolation(f"Duplicate edge id {edge_doc.id!r}", keys=["edges"])
        for endpoint in (edge_doc.from_, edge_doc.to):
            if endpoint not in nodes:
                raise DanglingReferenceError(
                    f"Edge {edge_doc.id!r} references missing node {endpoint!r}"
                )
        if edge_doc.from_ == edge_doc.to:
            raise SchemaViolation(
                f"Edge {edge_doc.id!r}: nominal self-loops are not allowed", keys=["edges"]
            )
        edges[edge_doc.id] = _edge_from_doc(edge_doc, edge_doc.from_, edge_doc.to, defaults)

    graph = TaskGraph(
        nodes=nodes,
        edges=edges,
        start=doc.start,
        terminal=doc.terminal,
        name=doc.name,
        monitor_defaults=defaults,
    )
    if not nx.has_path(graph.digraph, graph.start, graph.terminal):
        raise TerminalUnreachableError(
            f"Terminal {graph.terminal!r} is unreachable from start {graph.start!r}"
        )
    logger.debug("Built graph %r: %d nodes, %d edges", graph.name, len(nodes), len(edges))
    return graph


def _constraint_signature(constraints: Iterable[Any]) -> str:
    return canonical_json(
        sorted(canonical_json(c.model_dump(mode="json")) for c in constraints)
    )


def _branch_target(
    doc: RecoveryDoc,
    nodes: dict[str, Node],
    edges: Mapping[str, Edge],
    recovery_edges: dict[str, Edge],
    merge_candidates: dict[str, tuple[str, ...]],
    nominal_signatures: Mapping[str, str],
    defaults: MonitorDefaults,
) -> str:
    """Resolve the node a new recovery entry leads to, adding its recovery node and merges."""
    mode_id = doc.failure_mode.id
    if doc.node is None:
        target = doc.merge_to or ""
        if target not in nodes:
            raise MergeTargetMissingError(
                f"Recovery for {mode_id!r} merges into missing node {target!r}"
            )
        return target

    rec_node = _node_from_doc(doc.node, defaults, kind="recovery")
    matched = nominal_signatures.get(_constraint_signature(rec_node.sub_goals))
    if matched is not None:
        # Same sub-goal as a nominal node: route straight to it.
        logger.debug(
            "Recovery intent %r of %s reuses nominal node %r", doc.intent, mode_id, matched
        )
        return matched

    existing = nodes.get(rec_node.id)
    if existing is not None and existing != rec_node:
        raise SchemaViolation(
            f"Recovery node id {rec_node.id!r} clashes with another node", keys=["recovery"]
        )
    nodes[rec_node.id] = rec_node
    merges: list[str] = list(merge_candidates.get(rec_node.id, ()))
    for merge in doc.merges:
        if merge.to not in nodes:
            raise MergeTargetMissingError(
                f"Recovery node {rec_node.id!r} merges into missing node {merge.to!r}"
            )
        if merge.edge.id in recovery_edges and existing is not None:
            continue
        if merge.edge.id in edges or merge.edge.id in recovery_edges:
            raise SchemaViolation(f"Duplicate edge id {merge.edge.id!r}", keys=["recovery"])
        recovery_edges[merge.edge.id] = _edge_from_doc(
            merge.edge, rec_node.id, merge.to, defaults, recovery=True, intent=doc.intent
        )
        if merge.to not in merges:
            merges.append(merge.to)
    merge_candidates[rec_node.id] = tuple(merges)
    return rec_node.id


def augment(
    graph: TaskGraph,
    recovery_spec: Sequence[RecoveryDoc] | Sequence[Mapping[str, Any]],
    monitor_defaults: MonitorDefaults | None = None,
) -> AugmentedGraph:
    """Attach recovery branches and populate the recovery mapping of every failure mode.

    Augmentation always starts from the nominal graph, so applying it twice with the same
    spec yields the same result. A failure mode may sit on a recovery edge declared by an
    earlier document.

    Raises:
        UnknownNominalEdgeError: a failure mode names an edge that does not exist yet.
        DanglingReferenceError: ``route_to`` names an unknown recovery edge.
        MergeTargetMissingError: a merge target does not exist.
        SchemaViolation: duplicate recovery node, edge or failure mode ids.
    """
    base = graph.base if isinstance(graph, AugmentedGraph) and graph.base else graph
    defaults = monitor_defaults or base.monitor_defaults
    try:
        docs = tuple(
            d if isinstance(d, RecoveryDoc) else RecoveryDoc.model_validate(d)
            for d in recovery_spec
        )
    except ValidationError as exc:
        raise SchemaViolation(
            f"Invalid recovery document: {exc}", keys=validation_error_keys(exc)
        ) from exc

    nodes = dict(base.nodes)
    edges = dict(base.edges)
    recovery_edges: dict[str, Edge] = {}
    merge_candidates: dict[str, tuple[str, ...]] = {}
    nominal_signatures = {
        _constraint_signature(n.sub_goals): n.id
        for n in base.nodes.values()
        if n.sub_goals
    }

    for doc in docs:
        mode_doc = doc.failure_mode
        owner = edges if mode_doc.edge in edges else recovery_edges
        if mode_doc.edge not in owner:
            raise UnknownNominalEdgeError(
                f"Failure mode {mode_doc.id!r} references unknown edge {mode_doc.edge!r}"
            )
        failing = owner[mode_doc.edge]
        context = failing.source
        if any(m.id == mode_doc.id for m in failing.failure_modes):
            raise SchemaViolation(
                f"Duplicate failure mode {mode_doc.id!r} on edge {failing.id!r}",
                keys=["recovery"],
            )

        if doc.entry is None:
            routed = recovery_edges.get(doc.route_to or "")
            if routed is None:
                raise DanglingReferenceError(
                    f"Recovery for {mode_doc.id!r} routes to unknown recovery edge "
                    f"{doc.route_to!r}"
                )
            if routed.source != context:
                raise SchemaViolation(
                    f"Recovery edge {routed.id!r} does not leave {context!r}",
                    keys=["recovery"],
                )
            entry_id = routed.id
        else:
            entry_id = doc.entry.id
            if entry_id in edges or entry_id in recovery_edges:
                raise SchemaViolation(f"Duplicate edge id {entry_id!r}", keys=["recovery"])
            target = _branch_target(
                doc, nodes, edges, recovery_edges, merge_candidates, nominal_signatures, defaults
            )
            recovery_edges[entry_id] = _edge_from_doc(
                doc.entry, context, target, defaults, recovery=True, intent=doc.intent
            )

        detector = _resolve(mode_doc.detector, defaults)
        epsilon = detector.epsilon if detector.epsilon is not None else defaults.epsilon
        k = detector.k if detector.k is not None else defaults.k
        detector = detector.model_copy(update={"epsilon": epsilon, "k": k})
        mode = FailureMode(
            id=mode_doc.id,
            edge=failing.id,
            detector=detector,
            margin_epsilon=float(epsilon),
            persistence_k=int(k),
            recovery_edge=entry_id,
        )
        owner[failing.id] = replace(failing, failure_modes=failing.failure_modes + (mode,))

    edges.update(recovery_edges)
    return AugmentedGraph(
        nodes=nodes,
        edges=edges,
        start=base.start,
        terminal=base.terminal,
        name=base.name,
        monitor_defaults=base.monitor_defaults,
        base=base,
        merge_candidates=merge_candidates,
        recovery_spec=docs,
    )


# ---------------------------------------------------------------------------
# Shortest paths
# ---------------------------------------------------------------------------


def dist(graph: TaskGraph, u: str, v: str) -> float:
    """Minimal total weight over directed paths ``u -> v``; :data:`UNREACHABLE` if none."""
    for node in (u, v):
        if node not in graph.nodes:
            raise DanglingReferenceError(f"Unknown node {node!r}")
    try:
        return float(nx.dijkstra_path_length(graph.digraph, u, v, weight="weight"))
    except nx.NetworkXNoPath:
        return UNREACHABLE


def dist_to(graph: TaskGraph, v: str) -> dict[str, float]:
    """Cost-to-go from every node to ``v``."""
    lengths = nx.single_source_dijkstra_path_length(
        graph.digraph.reverse(copy=False), v, weight="weight"
    )
    return {n: float(lengths.get(n, UNREACHABLE)) for n in graph.nodes}


def shortest_path(graph: TaskGraph, u: str, v: str) -> list[str] | None:
    """Cheapest path ``u -> v``; ties broken by the lexicographically smallest next node."""
    remaining = dist_to(graph, v)
    if math.isinf(remaining.get(u, UNREACHABLE)):
        return None
    path = [u]
    seen = {u}
    current = u
    g = graph.digraph
    while current != v:
        candidates = sorted(
            nxt
            for nxt in g.successors(current)
            if nxt not in seen
            and abs(g[current][nxt]["weight"] + remaining[nxt] - remaining[current]) <= _TIE_TOL
        )
        if not candidates:
            return None
        current = candidates[0]
        seen.add(current)
        path.append(current)
    return path


# ---------------------------------------------------------------------------
# Forward-moving filter
# ---------------------------------------------------------------------------


def filter_forward_moving(graph: AugmentedGraph) -> AugmentedGraph:
    """Drop recovery branches that would increase the cost-to-go to the terminal.

    A branch is kept iff ``dist(target, terminal) <= dist(context, terminal)`` where the
    context is the source node of the failing edge and the target is the node the recovery
    entry edge leads to. Removal repeats until no retained branch violates the rule.
    """
    current = graph
    rejections: list[Rejection] = list(graph.rejections)
    while True:
        remaining = dist_to(current, current.terminal)
        rejected: list[Rejection] = []
        for edge in current.edges.values():
            for mode in edge.failure_modes:
                entry = current.edges[mode.recovery_edge or ""]
                d_rec = remaining[entry.target]
                d_fail = remaining[edge.source]
                if d_rec > d_fail:
                    rejected.append(
                        Rejection(mode.id, edge.id, entry.id, entry.target, d_rec, d_fail)
                    )
        if not rejected:
            break
        for r in rejected:
            logger.warning(
                "Rejected recovery %s on %s: dist(%s)=%s > dist(context)=%s",
                r.failure_mode,
                r.edge,
                r.recovery_node,
                r.dist_recovery,
                r.dist_failure,
            )
        rejections.extend(rejected)
        current = _without(current, {(r.edge, r.failure_mode) for r in rejected})
    if not rejections:
        return current
    return replace(current, rejections=tuple(rejections))


def _live_recovery_edges(edges: Mapping[str, Edge], nodes: Mapping[str, Node]) -> set[str]:
    """Recovery edges reachable from a failure mode of some nominal edge."""
    frontier: list[str | None] = [
        m.recovery_edge for e in edges.values() if not e.recovery for m in e.failure_modes
    ]
    live: set[str] = set()
    while frontier:
        edge_id = frontier.pop()
        if edge_id is None or edge_id in live or edge_id not in edges:
            continue
        live.add(edge_id)
        edge = edges[edge_id]
        frontier.extend(m.recovery_edge for m in edge.failure_modes)
        if nodes[edge.target].kind == "recovery":
            frontier.extend(
                e.id for e in edges.values() if e.recovery and e.source == edge.target
            )
    return live


def _without(graph: AugmentedGraph, dropped: set[tuple[str, str]]) -> AugmentedGraph:
    edges = {
        edge.id: replace(
            edge,
            failure_modes=tuple(m for m in edge.failure_modes if (edge.id, m.id) not in dropped),
        )
        for edge in graph.edges.values()
    }
    live = _live_recovery_edges(edges, graph.nodes)
    edges = {edge_id: e for edge_id, e in edges.items() if not e.recovery or edge_id in live}

    # Recovery nodes that no live recovery edge leads into are unreachable branches.
    reached = {e.target for e in edges.values() if e.recovery}
    nodes = {
        node_id: n
        for node_id, n in graph.nodes.items()
        if n.kind != "recovery" or node_id in reached
    }
    merge_candidates = {k: v for k, v in graph.merge_candidates.items() if k in nodes}
    return replace(
        graph,
        nodes=nodes,
        edges=edges,
        merge_candidates=merge_candidates,
    )


# ---------------------------------------------------------------------------
# Lookups
# ---------------------------------------------------------------------------


def recovery_target(edge: Edge, failure_id: str) -> str:
    """The pre-compiled recovery edge id for ``failure_id`` on ``edge``.

    Raises:
        UnknownFailureModeError: the edge declares no such failure mode.
    """
    mode = edge.failure_mode(failure_id)
    if mode.recovery_edge is None:
        raise UnknownFailureModeError(
            f"Failure mode {failure_id!r} on {edge.id!r} has no recovery mapping"
        )
    return mode.recovery_edge


def outgoing(graph: TaskGraph, node: str) -> list[Edge]:
    """Out-edges in declaration order, nominal before recovery."""
    if node not in graph.nodes:
        raise DanglingReferenceError(f"Unknown node {node!r}")
    out = [e for e in graph.edges.values() if e.source == node]
    return [e for e in out if not e.recovery] + [e for e in out if e.recovery]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _dump(model: Any) -> Any:
    return model.model_dump(mode="json", by_alias=True, exclude_none=True)


def _program_doc(program: Any) -> Any:
    if isinstance(program, tuple):
        return [_dump(a) for a in program]
    return _dump(program)


def _node_doc(node: Node) -> dict[str, Any]:
    return {
        "id": node.id,
        "kind": node.kind,
        "sub_goals": [_dump(c) for c in node.sub_goals],
        "gripper_intent": {arm: _dump(i) for arm, i in node.gripper_intent.items()},
        "required_events": list(node.required_events),
    }


def graph_to_document(graph: TaskGraph) -> dict[str, Any]:
    """Serialize to a graph document that :func:`build_graph` (and :func:`augment`) accept."""
    nominal_nodes = [n for n in graph.nodes.values() if n.kind != "recovery"]
    document: dict[str, Any] = {
        "name": graph.name,
        "nodes": [_node_doc(n) for n in nominal_nodes],
        "edges": [
            {
                "id": e.id,
                "from": e.source,
                "to": e.target,
                "program": _program_doc(e.program),
                "path_constraints": [_dump(c) for c in e.path_constraints],
                "weight": e.weight,
            }
            for e in graph.nominal_edges
        ],
        "start": graph.start,
        "terminal": graph.terminal,
        "recovery": [],
        "monitor_defaults": graph.monitor_defaults.model_dump(mode="json"),
    }
    if isinstance(graph, AugmentedGraph):
        retained = {(e.id, m.id) for e in graph.edges.values() for m in e.failure_modes}
        document["recovery"] = [
            _dump(doc)
            for doc in graph.recovery_spec
            if (doc.failure_mode.edge, doc.failure_mode.id) in retained
        ]
    return document

