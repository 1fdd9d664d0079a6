# src/chordgraph/planner.py
"""Where task specs come from: task files, the shipped-task registry or a planner service.

All three paths end in the same :class:`TaskSpec`, validated against one schema, so a
spec fetched from a service is indistinguishable from the same spec loaded from disk.
No network activity happens unless :func:`request_plan` is given an endpoint.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
import json
import logging
from pathlib import Path
import threading
from typing import Any, Literal, Mapping

from pydantic import BaseModel, ConfigDict, Field, ValidationError
import requests
import yaml

from chordgraph.config import ResolvedConfig
from chordgraph.exceptions import (
    InvalidResponse,
    ParseError,
    PlannerTimeout,
    PlannerUnreachable,
    SchemaViolation,
    TaskConfigError,
    UnknownTaskError,
)
from chordgraph.graph import AugmentedGraph, augment, build_graph, filter_forward_moving
from chordgraph.schema import GraphDocument, RecoveryDoc, SceneDoc, TaskDocument
from chordgraph.utils import validation_error_keys

logger = logging.getLogger(__name__)

DEFAULT_PLANNER_TIMEOUT = 60.0

SHIPPED_TASKS: dict[str, str] = {
    "single-arm pour water": "single_arm_pour.json",
    "dual-arm pour water": "dual_arm_pour.json",
    "rearrange table": "rearrange_table.json",
    "handover block": "handover.json",
    "setup coffee tray": "coffee_tray.json",
}

# Tasks registered at runtime; consulted before the shipped files.
_task_registry: dict[str, dict[str, Any]] = {}
_registry_lock = threading.RLock()

Stage = Literal["structure", "orchestrate", "compile-hints"]


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """A validated task document and where it came from."""

    document: TaskDocument
    source: str = "<memory>"

    @property
    def name(self) -> str:
        return self.document.name

    @property
    def instruction(self) -> str:
        return self.document.instruction

    @property
    def scene(self) -> SceneDoc:
        return self.document.scene

    def resolved_config(self) -> ResolvedConfig:
        doc = self.document
        return ResolvedConfig(
            noise=doc.noise,
            monitors=doc.monitor_defaults,
            solver=doc.solver,
            executor=doc.executor,
        )

    def overridden(self, overrides: Mapping[str, Mapping[str, Any]] | None) -> "TaskSpec":
        """A copy with config blocks (``noise``, ``monitors``, ``solver``, ``executor``) patched.

        Monitor overrides change the graph's thresholds too, so the graph is rebuilt.

        Raises:
            SchemaViolation: an unknown block or an invalid value.
        """
        if not overrides:
            return self
        unknown = set(overrides) - set(ResolvedConfig.model_fields)
        if unknown:
            raise SchemaViolation(f"Unknown config blocks: {sorted(unknown)}", keys=sorted(unknown))
        doc = self.document
        try:
            document = doc.model_copy(
                update={
                    "noise": doc.noise.merged(dict(overrides.get("noise", {}))),
                    "monitor_defaults": doc.monitor_defaults.merged(
                        dict(overrides.get("monitors", {}))
                    ),
                    "solver": doc.solver.merged(dict(overrides.get("solver", {}))),
                    "executor": doc.executor.merged(dict(overrides.get("executor", {}))),
                }
            )
        except ValidationError as exc:
            raise SchemaViolation(
                f"Invalid config override: {exc}", keys=validation_error_keys(exc)
            ) from exc
        return TaskSpec(document=document, source=self.source)

    @cached_property
    def graph(self) -> AugmentedGraph:
        """Nominal graph, augmented with the recovery spec and filtered."""
        base = build_graph(self.document)
        return filter_forward_moving(augment(base, self.document.recovery))

    def to_dict(self) -> dict[str, Any]:
        return self.document.model_dump(mode="json", by_alias=True, exclude_none=True)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def parse_document(text: str, *, fmt: str = "json", source: str = "<string>") -> dict[str, Any]:
    """Parse JSON or YAML text into a mapping.

    Raises:
        ParseError: the text is not valid; carries the 1-based line and column.
        SchemaViolation: the top level is not a mapping.
    """
    if fmt == "yaml":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ParseError(
                f"Invalid YAML in {source}: {getattr(exc, 'problem', None) or exc}",
                line=mark.line + 1 if mark is not None else None,
                column=mark.column + 1 if mark is not None else None,
            ) from exc
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(
                f"Invalid JSON in {source}: {exc.msg}", line=exc.lineno, column=exc.colno
            ) from exc
    if not isinstance(data, dict):
        raise SchemaViolation(f"{source}: top level must be a mapping", keys=["<root>"])
    return data


def _check_object_refs(doc: TaskDocument) -> None:
    known = {o.id for o in doc.scene.objects}
    missing: dict[str, str] = {}

    def visit(owner: str, templates: Any) -> None:
        for template in templates:
            for object_id in template.subjects():
                if object_id not in known:
                    missing.setdefault(object_id, owner)

    def visit_program(owner: str, program: Any) -> None:
        if isinstance(program, list):
            for action in program:
                for object_id in action.objects:
                    if object_id not in known:
                        missing.setdefault(object_id, owner)

    for node in doc.nodes:
        visit(f"nodes.{node.id}", node.sub_goals)
    for edge in doc.edges:
        visit(f"edges.{edge.id}", edge.path_constraints)
        visit_program(f"edges.{edge.id}", edge.program)
    for rec in doc.recovery:
        owner = f"recovery.{rec.failure_mode.edge}.{rec.failure_mode.id}"
        visit(owner, [rec.failure_mode.detector])
        if rec.entry is not None:
            visit_program(owner, rec.entry.program)
        if rec.node is not None:
            visit(owner, rec.node.sub_goals)
        for merge in rec.merges:
            visit_program(owner, merge.edge.program)
    if missing:
        raise SchemaViolation(
            f"Unknown object ids: {sorted(missing)}", keys=sorted(set(missing.values()))
        )


def task_from_data(data: Mapping[str, Any], *, source: str = "<memory>") -> TaskSpec:
    """Validate a parsed task document and build its filtered graph.

    Raises:
        SchemaViolation: schema errors, with the offending keys.
        TaskConfigError: any graph-construction error (dangling references and so on).
    """
    try:
        document = TaskDocument.model_validate(data)
    except ValidationError as exc:
        keys = validation_error_keys(exc)
        raise SchemaViolation(f"Invalid task document {source}: {exc}", keys=keys) from exc
    _check_object_refs(document)
    spec = TaskSpec(document=document, source=source)
    graph = spec.graph
    logger.debug(
        "Loaded task %r from %s: %d nodes, %d rejected branches",
        spec.name,
        source,
        len(graph.nodes),
        len(graph.rejections),
    )
    return spec


def load_task(path: str | Path) -> TaskSpec:
    """Load a task file; ``.yaml``/``.yml`` files are parsed as YAML, anything else as JSON.

    Raises:
        TaskConfigError: the file cannot be read.
        ParseError: the text does not parse.
        SchemaViolation: the document does not validate.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TaskConfigError(f"Cannot read task file {path}: {exc}") from exc
    fmt = "yaml" if path.suffix.lower() in (".yaml", ".yml") else "json"
    return task_from_data(parse_document(text, fmt=fmt, source=str(path)), source=str(path))


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


def _task_key(name: str) -> str:
    return " ".join(name.lower().replace("_", " ").split())


def _shipped_document(filename: str) -> dict[str, Any]:
    resource = resources.files("chordgraph").joinpath("tasks").joinpath(filename)
    text = resource.read_text(encoding="utf-8")
    return parse_document(text, source=f"chordgraph/tasks/{filename}")


def register_task(name: str, document: Mapping[str, Any]) -> None:
    """Make ``document`` resolvable by ``name``; later registrations replace earlier ones."""
    key = _task_key(name)
    task_from_data(document, source=f"registry:{key}")
    with _registry_lock:
        if key in _task_registry:
            logger.warning("Replacing registered task %r", key)
        _task_registry[key] = copy.deepcopy(dict(document))


def get_task_registry() -> dict[str, dict[str, Any]]:
    """Return a deep copy of the runtime-registered tasks."""
    with _registry_lock:
        return copy.deepcopy(_task_registry)


def clear_task_registry() -> None:
    """Forget runtime-registered tasks; shipped tasks stay resolvable."""
    with _registry_lock:
        _task_registry.clear()


def known_tasks() -> list[str]:
    with _registry_lock:
        return sorted(set(SHIPPED_TASKS) | set(_task_registry))


def stub_planner(instruction: str, scene: SceneDoc | Mapping[str, Any] | None = None) -> TaskSpec:
    """Return the canned spec whose task name matches ``instruction``.

    A ``scene`` replaces the canned one, as a planner given a fresh observation would.

    Raises:
        UnknownTaskError: no registered or shipped task has that name.
    """
    key = _task_key(instruction)
    with _registry_lock:
        registered = copy.deepcopy(_task_registry.get(key))
    if registered is not None:
        data = registered
    elif key in SHIPPED_TASKS:
        data = _shipped_document(SHIPPED_TASKS[key])
    else:
        raise UnknownTaskError(
            f"No task matches instruction {instruction!r}; known tasks: {known_tasks()}"
        )
    if scene is not None:
        data["scene"] = (
            scene.model_dump(mode="json") if isinstance(scene, SceneDoc) else dict(scene)
        )
    return task_from_data(data, source=f"stub:{key}")


def resolve_task(name_or_path: str | Path) -> TaskSpec:
    """A task file path, or the name of a registered or shipped task."""
    path = Path(name_or_path)
    if path.suffix.lower() in (".json", ".yaml", ".yml") or path.exists():
        return load_task(path)
    return stub_planner(str(name_or_path))


# ---------------------------------------------------------------------------
# Planner service
# ---------------------------------------------------------------------------


class PlannerRequest(BaseModel):
    """Body of ``POST /plan``."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    instruction: str = Field(min_length=1)
    scene: SceneDoc
    stage: Stage = "structure"


class PlannerResponse(BaseModel):
    """A graph fragment (``structure``) or a recovery fragment (``orchestrate``)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    stage: Stage
    graph: GraphDocument | None = None
    recovery: list[RecoveryDoc] = Field(default_factory=list)


def request_plan(
    endpoint: str,
    request: PlannerRequest,
    *,
    timeout: float = DEFAULT_PLANNER_TIMEOUT,
) -> PlannerResponse:
    """POST ``request`` to ``{endpoint}/plan`` and validate the answer.

    Raises:
        PlannerUnreachable: no endpoint, or the connection failed.
        PlannerTimeout: no answer within ``timeout`` seconds, or a 504.
        InvalidResponse: a 422, any other non-200 status, or a body that does not validate.
    """
    if not endpoint:
        raise PlannerUnreachable("No planner endpoint configured")
    url = f"{endpoint.rstrip('/')}/plan"
    logger.info("Requesting %s stage from %s", request.stage, url)
    try:
        response = requests.post(url, json=request.model_dump(mode="json"), timeout=timeout)
    except requests.Timeout as exc:
        raise PlannerTimeout(f"Planner at {url} did not answer within {timeout} s") from exc
    except requests.RequestException as exc:
        raise PlannerUnreachable(f"Cannot reach planner at {url}: {exc}") from exc

    if response.status_code == 504:
        raise PlannerTimeout(f"Planner at {url} timed out (504)")
    if response.status_code == 422:
        raise InvalidResponse(f"Planner at {url} reported a schema-invalid plan (422)")
    if response.status_code != 200:
        raise InvalidResponse(f"Planner at {url} answered with status {response.status_code}")
    try:
        body = response.json()
    except ValueError as exc:
        raise InvalidResponse(f"Planner at {url} returned a non-JSON body") from exc
    try:
        parsed = PlannerResponse.model_validate(body)
    except ValidationError as exc:
        raise InvalidResponse(f"Planner response does not validate: {exc}") from exc
    if parsed.stage != request.stage:
        raise InvalidResponse(
            f"Asked for stage {request.stage!r}, planner answered {parsed.stage!r}"
        )
    return parsed


def fetch_task(
    endpoint: str,
    instruction: str,
    scene: SceneDoc,
    *,
    timeout: float = DEFAULT_PLANNER_TIMEOUT,
) -> TaskSpec:
    """Build a task spec from the ``structure`` and ``orchestrate`` stages of a service.

    Nothing is assembled until both answers validate, and the assembled document must
    pass the same checks as a task file.

    Raises:
        PlannerError: any transport or validation failure.
    """
    structure = request_plan(
        endpoint, PlannerRequest(instruction=instruction, scene=scene), timeout=timeout
    )
    if structure.graph is None:
        raise InvalidResponse("The structure stage returned no graph")
    orchestrate = request_plan(
        endpoint,
        PlannerRequest(instruction=instruction, scene=scene, stage="orchestrate"),
        timeout=timeout,
    )
    graph = structure.graph.model_dump(mode="json", by_alias=True, exclude_none=True)
    graph.pop("schema_version", None)
    recovery = list(graph.pop("recovery", []))
    recovery.extend(
        r.model_dump(mode="json", by_alias=True, exclude_none=True) for r in orchestrate.recovery
    )
    data = {
        "schema_version": 1,
        **graph,
        "name": graph.get("name") or instruction,
        "instruction": instruction,
        "scene": scene.model_dump(mode="json"),
        "recovery": recovery,
    }
    try:
        return task_from_data(data, source=f"planner:{endpoint}")
    except TaskConfigError as exc:
        raise InvalidResponse(f"Planner output does not form a valid task: {exc}") from exc
