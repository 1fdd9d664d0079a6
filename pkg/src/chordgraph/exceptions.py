# src/chordgraph/exceptions.py
from __future__ import annotations

from typing import Any, Sequence


class ChordGraphError(ValueError):
    """Root of every error raised by chordgraph.

    Subclasses :class:`ValueError` so that generic ``except ValueError`` call-sites
    keep working for caller-fixable problems.
    """


class TaskConfigError(ChordGraphError):
    """Raised for task or experiment documents that cannot be loaded.

    The CLI maps this family to exit code 2.
    """


class ParseError(TaskConfigError):
    """The document is not valid JSON/YAML text."""

    def __init__(self, message: str, *, line: int | None = None, column: int | None = None):
        location = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{location}")
        self.line = line
        self.column = column


class SchemaViolation(TaskConfigError):
    """The document parses but does not match the schema.

    ``keys`` lists the dotted locations of every offending entry.
    """

    def __init__(self, message: str, *, keys: Sequence[str] = ()):
        super().__init__(message)
        self.keys = tuple(keys)


class DanglingReferenceError(TaskConfigError):
    """An edge or recovery entry references a node that does not exist."""


class NoTerminalError(TaskConfigError):
    """The graph does not declare exactly one terminal node."""


class TerminalUnreachableError(TaskConfigError):
    """The terminal node cannot be reached from the start over nominal edges."""


class UnknownNominalEdgeError(TaskConfigError):
    """A failure mode references an edge id that is not a nominal edge."""


class MergeTargetMissingError(TaskConfigError):
    """A recovery branch merges into a node that does not exist."""


class UnknownFeatureKeyError(TaskConfigError):
    """A feature key is malformed or names an unknown feature family."""


class UnknownTaskError(TaskConfigError):
    """No shipped task matches the requested instruction."""


class UnknownFailureModeError(ChordGraphError):
    """The failure id is not declared on the edge."""


class UnknownObjectError(ChordGraphError):
    """A world operation referenced an object id that is not in the scene."""


class DegenerateCloudError(ChordGraphError):
    """The point cloud is too small or too flat for the requested geometry."""


class MissingFeatureError(ChordGraphError):
    """A detector needed a feature that was flagged missing."""

    def __init__(self, key: str):
        super().__init__(f"Feature {key!r} is missing")
        self.key = key


class InfeasibleError(ChordGraphError):
    """No candidate satisfied the constraints within the solver budget."""

    def __init__(self, message: str, *, problem: Any = None):
        super().__init__(message)
        self.problem = problem


class UnreachableTargetError(InfeasibleError):
    """An atomic action target could not be reached after clipping."""


class EpisodeAbort(ChordGraphError):
    """Terminates an episode early; ``reason`` is copied into the episode result."""

    reason = "Aborted"


class StepBudgetExceeded(EpisodeAbort):
    reason = "StepBudgetExceeded"


class RecoveryLoopCap(EpisodeAbort):
    reason = "RecoveryLoopCap"


class DeadEnd(EpisodeAbort):
    reason = "DeadEnd"


class PlannerError(ChordGraphError):
    """Base class for planner-service transport failures."""


class PlannerUnreachable(PlannerError):
    """The planner endpoint could not be contacted."""


class InvalidResponse(PlannerError):
    """The planner answered with a body that does not validate."""


class PlannerTimeout(PlannerError):
    """The planner did not answer within the configured timeout."""
