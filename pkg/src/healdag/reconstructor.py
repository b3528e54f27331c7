"""Repair policy: patching, subgraph reconstruction, budget and fallback."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Generic, Protocol, TypeVar

from healdag.errors import InvalidDeltaError, PlannerRefusalError
from healdag.evaluator import CauseKind, SuspensionCause
from healdag.experts import Expert, ExpertCall, ExprOutput, NodeFeedback, Payload
from healdag.graph import (
    DeltaKind,
    ExpertKind,
    GraphDelta,
    NodeId,
    TaskGraph,
    Vertex,
    downstream_closure,
)
from healdag.repository import ArtifactRepository, EntryStatus

T = TypeVar("T")

FALLBACK_NODE = NodeId("fallback")


class RepairAction(str, Enum):
    PATCH = "PATCH"
    RECONSTRUCT = "RECONSTRUCT"
    FALLBACK = "FALLBACK"


@dataclass
class RepairBudget:
    omega_max: int = 3
    eta: int = 0

    def __post_init__(self) -> None:
        if self.omega_max <= 0:
            raise ValueError("omega_max must be positive")
        if not 0 <= self.eta <= self.omega_max:
            raise ValueError("eta must lie in [0, omega_max]")

    @property
    def exhausted(self) -> bool:
        return self.eta >= self.omega_max

    def charge(self) -> None:
        if self.exhausted:
            raise RuntimeError("repair budget exhausted")
        self.eta += 1


# -- planner port -----------------------------------------------------------


@dataclass(frozen=True)
class PlannerReply(Generic[T]):
    """A planner result plus the cost of producing it."""

    value: T
    tokens_prompt: int = 0
    tokens_completion: int = 0
    wall_time: float = 0.0

    @property
    def tokens(self) -> int:
        return self.tokens_prompt + self.tokens_completion


@dataclass(frozen=True)
class RepairContext:
    cause: SuspensionCause
    generation: int
    failed_feedback: NodeFeedback | None = None
    upstream: tuple[Payload, ...] = ()


@dataclass(frozen=True)
class Subgraph:
    vertices: tuple[Vertex, ...]
    sink: NodeId | None = None


class PlannerPort(Protocol):
    def initial_plan(self, query: str) -> PlannerReply[TaskGraph]: ...

    def propose_patch(
        self, failed: Vertex, graph: TaskGraph, context: RepairContext
    ) -> PlannerReply[Vertex | None]: ...

    def propose_subgraph(
        self, root: Vertex, graph: TaskGraph, removed: frozenset[NodeId], context: RepairContext
    ) -> PlannerReply[Subgraph | None]: ...


def clone_closure(
    graph: TaskGraph, removed: frozenset[NodeId], generation: int
) -> Subgraph:
    """Fresh copies of the removed live vertices, wired like the originals."""
    live = [n for n in removed if n not in graph.failed]
    mapping = {n: NodeId(n.id, generation) for n in live}
    vertices = []
    for n in sorted(live, key=str):
        v = graph.vertices[n]
        parents = tuple(mapping.get(p, p) for p in v.parents if p in mapping or p not in removed)
        vertices.append(Vertex(mapping[n], v.expert_kind, v.instruction, parents))
    sink = mapping.get(graph.sink)
    return Subgraph(tuple(vertices), sink)


@dataclass
class ScriptedPlanner:
    """Deterministic planner: a fixed initial graph and mechanical repairs.

    Patches reuse the failed vertex's kind (``patch_kinds`` may override it
    per rendered node id); reconstructions re-instantiate the removed branch
    under a fresh generation. ``refuse`` lists capabilities that decline.
    """

    graph: TaskGraph
    tokens_prompt: int = 0
    tokens_completion: int = 0
    wall_time: float = 0.0
    patch_kinds: Mapping[str, ExpertKind] = field(default_factory=dict)
    refuse: frozenset[str] = frozenset()

    def _reply(self, value: Any) -> PlannerReply[Any]:
        return PlannerReply(value, self.tokens_prompt, self.tokens_completion, self.wall_time)

    def initial_plan(self, query: str) -> PlannerReply[TaskGraph]:
        return self._reply(self.graph)

    def propose_patch(
        self, failed: Vertex, graph: TaskGraph, context: RepairContext
    ) -> PlannerReply[Vertex | None]:
        if "patch" in self.refuse:
            return self._reply(None)
        kind = self.patch_kinds.get(str(failed.id), failed.expert_kind)
        vertex = Vertex(
            NodeId(failed.id.id, context.generation, patch=True),
            kind,
            f"Repair: {failed.instruction}",
            failed.parents,
        )
        return self._reply(vertex)

    def propose_subgraph(
        self, root: Vertex, graph: TaskGraph, removed: frozenset[NodeId], context: RepairContext
    ) -> PlannerReply[Subgraph | None]:
        if "subgraph" in self.refuse:
            return self._reply(None)
        return self._reply(clone_closure(graph, removed, context.generation))


# -- decisions and deltas ---------------------------------------------------


def decide_repair(
    cause: SuspensionCause, patch_already_failed_for_node: bool, budget: RepairBudget
) -> RepairAction:
    if cause.kind is CauseKind.NONE:
        raise ValueError("no suspension to repair")
    if budget.exhausted:
        return RepairAction.FALLBACK
    if cause.kind is CauseKind.GLOBAL_UNCERTAINTY or patch_already_failed_for_node:
        return RepairAction.RECONSTRUCT
    return RepairAction.PATCH


def _failed_feedback(repo: ArtifactRepository, node: NodeId) -> NodeFeedback | None:
    entry = repo.latest(node)
    return None if entry is None else entry.feedback


def _upstream(graph: TaskGraph, node: NodeId, repo: ArtifactRepository) -> tuple[Payload, ...]:
    out = []
    for p in graph[node].parents:
        if repo.committed_entry(p) is not None:
            out.append(repo.payload(p))
    return tuple(out)


def build_patch_delta(
    graph: TaskGraph,
    failed: NodeId,
    planner: PlannerPort,
    repo: ArtifactRepository,
    cause: SuspensionCause,
    generation: int,
) -> tuple[GraphDelta, PlannerReply[Vertex | None]]:
    """PATCH_INSERT: a patch vertex takes over the failed node's parents and children.

    Raises PlannerRefusalError when the planner offers no vertex; the reply
    is attached to the exception as ``reply`` so its cost is still charged.
    """
    vertex = graph[failed]
    context = RepairContext(cause, generation, _failed_feedback(repo, failed), _upstream(graph, failed, repo))
    reply = planner.propose_patch(vertex, graph, context)
    patch = reply.value
    if patch is None:
        err = PlannerRefusalError(f"planner declined to patch {failed}")
        err.reply = reply  # type: ignore[attr-defined]
        raise err
    if patch.parents != vertex.parents:
        raise InvalidDeltaError(f"patch for {failed} must inherit its parents")
    if patch.expert_kind is not vertex.expert_kind:
        allowed = cause.kind is CauseKind.CONFIDENCE_FLOOR and patch.expert_kind is ExpertKind.RAG
        if not allowed:
            raise InvalidDeltaError(
                f"patch kind {patch.expert_kind.value} differs from {vertex.expert_kind.value}"
            )
    rewired = frozenset((patch.id, child) for child in graph.children(failed))
    delta = GraphDelta(
        kind=DeltaKind.PATCH_INSERT,
        added=(patch,),
        rewired_edges=rewired,
        trigger=cause,
        failed=failed,
        new_sink=patch.id if graph.sink == failed else None,
    )
    return delta, reply


def build_reconstruct_delta(
    graph: TaskGraph,
    failed: NodeId,
    planner: PlannerPort,
    repo: ArtifactRepository,
    cause: SuspensionCause,
    generation: int,
    replacement_size_cap: int = 2,
) -> tuple[GraphDelta, PlannerReply[Subgraph | None]]:
    """SUBGRAPH_REPLACE: drop the failed node's downstream closure, splice a fresh branch."""
    removed = frozenset(downstream_closure(graph, failed))
    context = RepairContext(cause, generation, _failed_feedback(repo, failed), _upstream(graph, failed, repo))
    reply = planner.propose_subgraph(graph[failed], graph, removed, context)
    sub = reply.value
    if sub is None or not sub.vertices:
        err = PlannerRefusalError(f"planner declined to rebuild from {failed}")
        err.reply = reply  # type: ignore[attr-defined]
        raise err
    if len(sub.vertices) > len(removed) + replacement_size_cap:
        raise InvalidDeltaError(
            f"replacement of {len(sub.vertices)} nodes exceeds cap "
            f"{len(removed)} + {replacement_size_cap}"
        )
    if graph.sink in removed and sub.sink is None:
        raise InvalidDeltaError("replacement must supply a sink when the old sink is removed")
    delta = GraphDelta(
        kind=DeltaKind.SUBGRAPH_REPLACE,
        removed=removed,
        added=sub.vertices,
        trigger=cause,
        failed=failed,
        new_sink=sub.sink if graph.sink in removed else None,
    )
    return delta, reply


def discard_removed(repo: ArtifactRepository, removed: frozenset[NodeId]) -> list[int]:
    """Mark committed artifacts of removed nodes DISCARDED; returns entry indices."""
    touched = []
    for entry in repo.entries:
        if entry.node in removed and repo.status(entry.index) is EntryStatus.COMMITTED:
            repo.transition(entry.index, EntryStatus.DISCARDED)
            touched.append(entry.index)
    return touched


@dataclass(frozen=True)
class FallbackResult:
    call: ExpertCall
    feedback: NodeFeedback

    @property
    def answer(self) -> str | None:
        if self.feedback.exception or not isinstance(self.feedback.output, ExprOutput):
            return None
        return self.feedback.output.draft


def fallback_call(graph: TaskGraph, repo: ArtifactRepository) -> ExpertCall:
    payloads = tuple(
        Payload(e.node, e.feedback.output, e.index)
        for e in repo.with_status(EntryStatus.COMMITTED)
    )
    vertex = Vertex(
        FALLBACK_NODE,
        ExpertKind.EXPR,
        graph.query,
        tuple(p.node for p in payloads),
    )
    return ExpertCall(vertex, payloads, query=graph.query)


def fallback_answer(
    graph: TaskGraph, repo: ArtifactRepository, expert: Expert
) -> FallbackResult:
    """Single EXPR call over the query and every live committed artifact."""
    call = fallback_call(graph, repo)
    return FallbackResult(call, expert.execute(call))


def is_patch_failure(node: NodeId) -> bool:
    return node.patch


def repair_targets(delta: GraphDelta) -> dict[str, Sequence[str]]:
    return {
        "removed": sorted(str(n) for n in delta.removed),
        "added": [str(v.id) for v in delta.added],
    }
