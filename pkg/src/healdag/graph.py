"""Versioned task graph: vertices, structural queries and delta application."""

from __future__ import annotations

from collections import deque
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import TYPE_CHECKING, Any

from healdag.errors import InvalidDeltaError, UnknownNodeError

if TYPE_CHECKING:
    from healdag.evaluator import SuspensionCause


class ExpertKind(str, Enum):
    RAG = "RAG"
    LOGIC = "LOGIC"
    EXPR = "EXPR"


PATCH_SUFFIX = "_patch"


@dataclass(frozen=True)
class NodeId:
    """Vertex identifier.

    ``generation`` separates repair descendants that share a base ``id``;
    ``patch`` marks nodes inserted by fine-grained patching. The rendered
    form (``str(node)``) is what files and fixtures use:
    ``v2``, ``v2_patch``, ``v2@2``, ``v2_patch@3``.
    """

    id: str
    generation: int = 0
    patch: bool = False

    def __post_init__(self) -> None:
        if not self.id or "@" in self.id or self.id.endswith(PATCH_SUFFIX):
            raise ValueError(f"invalid base node id {self.id!r}")
        if self.generation < 0:
            raise ValueError("generation must be non-negative")
        if self.patch and self.generation == 0:
            raise ValueError("patch nodes need a generation > 0")

    def __str__(self) -> str:
        text = self.id + (PATCH_SUFFIX if self.patch else "")
        if self.generation == 0 or (self.patch and self.generation == 1):
            return text
        return f"{text}@{self.generation}"

    @classmethod
    def parse(cls, text: str) -> NodeId:
        base, _, gen = text.partition("@")
        patch = base.endswith(PATCH_SUFFIX)
        if patch:
            base = base[: -len(PATCH_SUFFIX)]
        if gen:
            if not gen.isdigit():
                raise ValueError(f"bad generation in node id {text!r}")
            generation = int(gen)
        else:
            generation = 1 if patch else 0
        return cls(base, generation, patch)

    def sort_key(self) -> str:
        return str(self)


@dataclass(frozen=True)
class Vertex:
    id: NodeId
    expert_kind: ExpertKind
    instruction: str
    parents: tuple[NodeId, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": str(self.id),
            "expert_kind": self.expert_kind.value,
            "instruction": self.instruction,
            "parents": [str(p) for p in self.parents],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Vertex:
        return cls(
            id=NodeId.parse(data["id"]),
            expert_kind=ExpertKind(data["expert_kind"]),
            instruction=str(data.get("instruction", "")),
            parents=tuple(NodeId.parse(p) for p in data.get("parents", ())),
        )


@dataclass(frozen=True)
class Violation:
    code: str
    node: str | None = None
    detail: str = ""


@dataclass(frozen=True)
class TaskGraph:
    """Immutable snapshot of the task graph at one version.

    Edges are derived from the parent lists, so the edge set and the parent
    sets cannot drift apart. ``failed`` holds vertices retained for audit
    after a patch replaced them; they never enter a frontier again.
    """

    query: str
    vertices: Mapping[NodeId, Vertex]
    sink: NodeId
    version: int = 0
    failed: frozenset[NodeId] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertices", MappingProxyType(dict(self.vertices)))
        object.__setattr__(self, "failed", frozenset(self.failed))

    @classmethod
    def build(
        cls, query: str, vertices: Iterable[Vertex], sink: NodeId | str, version: int = 0
    ) -> TaskGraph:
        if isinstance(sink, str):
            sink = NodeId.parse(sink)
        return cls(query, {v.id: v for v in vertices}, sink, version)

    @property
    def edges(self) -> frozenset[tuple[NodeId, NodeId]]:
        return frozenset((p, v.id) for v in self.vertices.values() for p in v.parents)

    def children(self, node: NodeId) -> list[NodeId]:
        return sorted(
            (v.id for v in self.vertices.values() if node in v.parents), key=NodeId.sort_key
        )

    def __contains__(self, node: object) -> bool:
        return node in self.vertices

    def __getitem__(self, node: NodeId) -> Vertex:
        try:
            return self.vertices[node]
        except KeyError:
            raise UnknownNodeError(f"unknown node {node}") from None

    def topological_ranks(self) -> dict[NodeId, int]:
        """Longest-path depth from any root. Requires an acyclic graph."""
        ranks: dict[NodeId, int] = {}
        for node in topological_order(self):
            parents = [p for p in self.vertices[node].parents if p in self.vertices]
            ranks[node] = 1 + max((ranks[p] for p in parents), default=-1)
        return ranks

    def to_dict(self) -> dict[str, Any]:
        ordered = sorted(self.vertices.values(), key=lambda v: str(v.id))
        return {
            "version": self.version,
            "query": self.query,
            "sink": str(self.sink),
            "failed": sorted(str(n) for n in self.failed),
            "vertices": [v.to_dict() for v in ordered],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TaskGraph:
        verts = [Vertex.from_dict(v) for v in data["vertices"]]
        ids = [v.id for v in verts]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate vertex ids in graph document")
        return cls(
            query=str(data["query"]),
            vertices={v.id: v for v in verts},
            sink=NodeId.parse(data["sink"]),
            version=int(data.get("version", 0)),
            failed=frozenset(NodeId.parse(n) for n in data.get("failed", ())),
        )


def topological_order(graph: TaskGraph) -> list[NodeId]:
    """Kahn's algorithm with lexicographic tie-break; omits nodes on cycles."""
    indegree = {
        n: sum(1 for p in v.parents if p in graph.vertices) for n, v in graph.vertices.items()
    }
    children: dict[NodeId, list[NodeId]] = {n: [] for n in graph.vertices}
    for v in graph.vertices.values():
        for p in v.parents:
            if p in children:
                children[p].append(v.id)
    ready = sorted((n for n, d in indegree.items() if d == 0), key=NodeId.sort_key)
    order: list[NodeId] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for child in children[node]:
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(child)
        ready.sort(key=NodeId.sort_key)
    return order


def nodes_on_cycles(graph: TaskGraph) -> set[NodeId]:
    """Vertices that lie on at least one directed cycle."""
    acyclic = set(topological_order(graph))
    suspects = [n for n in graph.vertices if n not in acyclic]
    children: dict[NodeId, list[NodeId]] = {}
    for v in graph.vertices.values():
        for p in v.parents:
            children.setdefault(p, []).append(v.id)
    on_cycle: set[NodeId] = set()
    for node in suspects:
        stack = list(children.get(node, ()))
        seen: set[NodeId] = set()
        while stack:
            cur = stack.pop()
            if cur == node:
                on_cycle.add(node)
                break
            if cur not in seen:
                seen.add(cur)
                stack.extend(children.get(cur, ()))
    return on_cycle


def validate(graph: TaskGraph) -> list[Violation]:
    report: list[Violation] = []
    for node, vertex in sorted(graph.vertices.items(), key=lambda kv: str(kv[0])):
        if vertex.id != node:
            report.append(Violation("ID_MISMATCH", str(node), f"vertex carries {vertex.id}"))
        if not isinstance(vertex.expert_kind, ExpertKind):
            report.append(Violation("INVALID_EXPERT_KIND", str(node), repr(vertex.expert_kind)))
        if len(set(vertex.parents)) != len(vertex.parents):
            report.append(Violation("DUPLICATE_PARENT", str(node)))
        for parent in vertex.parents:
            if parent not in graph.vertices:
                report.append(Violation("DANGLING_PARENT", str(node), f"parent {parent}"))
    cyclic = nodes_on_cycles(graph)
    if cyclic:
        members = ",".join(sorted(str(n) for n in cyclic))
        report.append(Violation("CYCLE", None, members))
    for node in graph.failed:
        if node not in graph.vertices:
            report.append(Violation("DANGLING_FAILED", str(node)))

    has_child = {p for v in graph.vertices.values() for p in v.parents}
    sinks = sorted(
        (n for n in graph.vertices if n not in has_child and n not in graph.failed),
        key=NodeId.sort_key,
    )
    if graph.sink not in graph.vertices:
        report.append(Violation("UNKNOWN_SINK", str(graph.sink)))
    elif graph.sink in graph.failed:
        report.append(Violation("FAILED_SINK", str(graph.sink)))
    if not sinks:
        report.append(Violation("NO_SINK"))
    elif len(sinks) > 1:
        report.append(Violation("MULTIPLE_SINKS", None, ",".join(str(s) for s in sinks)))
    elif sinks[0] != graph.sink and graph.sink in graph.vertices:
        report.append(Violation("SINK_MISMATCH", str(graph.sink), f"actual sink {sinks[0]}"))
    return report


def ready_frontier(graph: TaskGraph, committed: Iterable[NodeId]) -> list[NodeId]:
    """Uncommitted, non-failed vertices whose parents are all committed.

    Ordered by topological rank, then by rendered id.
    """
    done = set(committed)
    ranks = graph.topological_ranks()
    ready = [
        n
        for n, v in graph.vertices.items()
        if n not in done and n not in graph.failed and all(p in done for p in v.parents)
    ]
    return sorted(ready, key=lambda n: (ranks.get(n, 0), str(n)))


def downstream_closure(graph: TaskGraph, root: NodeId) -> set[NodeId]:
    if root not in graph.vertices:
        raise UnknownNodeError(f"unknown node {root}")
    children: dict[NodeId, list[NodeId]] = {}
    for v in graph.vertices.values():
        for p in v.parents:
            children.setdefault(p, []).append(v.id)
    seen = {root}
    queue = deque([root])
    while queue:
        for child in children.get(queue.popleft(), ()):
            if child not in seen:
                seen.add(child)
                queue.append(child)
    return seen


class DeltaKind(str, Enum):
    PATCH_INSERT = "PATCH_INSERT"
    SUBGRAPH_REPLACE = "SUBGRAPH_REPLACE"


@dataclass(frozen=True)
class GraphDelta:
    """One topological transformation step.

    ``rewired_edges`` are ``(new_parent, child)`` pairs. Under PATCH_INSERT
    each pair replaces ``failed`` in the child's parent list; under
    SUBGRAPH_REPLACE each pair adds ``new_parent`` to a surviving child.
    """

    kind: DeltaKind
    removed: frozenset[NodeId] = frozenset()
    added: tuple[Vertex, ...] = ()
    rewired_edges: frozenset[tuple[NodeId, NodeId]] = frozenset()
    trigger: SuspensionCause | None = None
    failed: NodeId | None = None
    new_sink: NodeId | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "failed": None if self.failed is None else str(self.failed),
            "removed": sorted(str(n) for n in self.removed),
            "added": [v.to_dict() for v in self.added],
            "rewired_edges": sorted([str(a), str(b)] for a, b in self.rewired_edges),
            "new_sink": None if self.new_sink is None else str(self.new_sink),
        }


def apply_delta(
    graph: TaskGraph, delta: GraphDelta, committed: Iterable[NodeId] = ()
) -> TaskGraph:
    """Return version ``graph.version + 1`` with the delta applied.

    ``committed`` lets the caller assert that a PATCH_INSERT leaves committed
    work untouched. Raises InvalidDeltaError if the result would not validate.
    """
    vertices = dict(graph.vertices)
    failed = set(graph.failed)
    sink = graph.sink
    for v in delta.added:
        if v.id in vertices and v.id not in delta.removed:
            raise InvalidDeltaError(f"added vertex {v.id} already exists")
    if delta.failed is not None and delta.failed not in vertices:
        raise InvalidDeltaError(f"failed node {delta.failed} not in graph")
    if delta.new_sink is not None and delta.new_sink not in {v.id for v in delta.added}:
        if delta.new_sink not in vertices or delta.new_sink in delta.removed:
            raise InvalidDeltaError(f"new sink {delta.new_sink} is not in the result")

    if delta.kind is DeltaKind.PATCH_INSERT:
        if delta.removed:
            raise InvalidDeltaError("PATCH_INSERT may not remove vertices")
        if delta.failed is None and (delta.added or delta.rewired_edges):
            raise InvalidDeltaError("PATCH_INSERT with additions needs a failed node")
        for v in delta.added:
            vertices[v.id] = v
        for new_parent, child in delta.rewired_edges:
            if child not in vertices or new_parent not in vertices:
                raise InvalidDeltaError(f"dangling rewire {new_parent}->{child}")
            old = vertices[child]
            if delta.failed not in old.parents:
                raise InvalidDeltaError(f"{child} is not a child of {delta.failed}")
            parents = tuple(new_parent if p == delta.failed else p for p in old.parents)
            vertices[child] = replace(old, parents=parents)
        if delta.failed is not None:
            failed.add(delta.failed)
            if sink == delta.failed:
                if delta.new_sink is None:
                    raise InvalidDeltaError("patching the sink requires new_sink")
                sink = delta.new_sink
    else:
        done = set(committed)
        missing = delta.removed - set(vertices)
        if missing:
            raise InvalidDeltaError(f"cannot remove unknown nodes {sorted(map(str, missing))}")
        for node in delta.removed:
            del vertices[node]
            failed.discard(node)
        for v in delta.added:
            vertices[v.id] = v
        for new_parent, child in delta.rewired_edges:
            if child not in vertices or new_parent not in vertices:
                raise InvalidDeltaError(f"dangling rewire {new_parent}->{child}")
            if child in done:
                raise InvalidDeltaError(f"cannot rewire committed node {child}")
            old = vertices[child]
            if new_parent not in old.parents:
                vertices[child] = replace(old, parents=old.parents + (new_parent,))
        if sink in delta.removed:
            if delta.new_sink is None:
                raise InvalidDeltaError("removing the sink requires new_sink")
            sink = delta.new_sink
        elif delta.new_sink is not None:
            sink = delta.new_sink

    result = TaskGraph(graph.query, vertices, sink, graph.version + 1, frozenset(failed))
    report = validate(result)
    if report:
        codes = ", ".join(f"{v.code}({v.node or v.detail})" for v in report)
        raise InvalidDeltaError(f"delta yields an invalid graph: {codes}")
    return result


@dataclass
class GraphHistory:
    """Append-only sequence of graph versions; index equals version."""

    versions: list[TaskGraph] = field(default_factory=list)

    @property
    def current(self) -> TaskGraph:
        return self.versions[-1]

    def start(self, graph: TaskGraph) -> None:
        if self.versions:
            raise RuntimeError("history already started")
        self.versions.append(graph)

    def apply(self, delta: GraphDelta, committed: Iterable[NodeId] = ()) -> TaskGraph:
        new = apply_delta(self.current, delta, committed)
        self.versions.append(new)
        return new

    def __getitem__(self, version: int) -> TaskGraph:
        return self.versions[version]

    def __len__(self) -> int:
        return len(self.versions)
