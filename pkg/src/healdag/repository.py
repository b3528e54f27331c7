"""Global artifact repository: the only path by which payloads reach experts."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from healdag.experts import NodeFeedback, Payload, output_to_dict
from healdag.graph import NodeId, TaskGraph


class EntryStatus(str, Enum):
    COMMITTED = "COMMITTED"
    FAILED = "FAILED"
    DISCARDED = "DISCARDED"
    SUPERSEDED = "SUPERSEDED"


_ALLOWED = {
    EntryStatus.COMMITTED: {EntryStatus.SUPERSEDED, EntryStatus.DISCARDED},
}


def output_digest(feedback_output: Any) -> str:
    text = json.dumps(output_to_dict(feedback_output), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RepoEntry:
    index: int
    version: int
    node: NodeId
    feedback: NodeFeedback
    initial_status: EntryStatus

    @property
    def digest(self) -> str:
        return output_digest(self.feedback.output)


@dataclass
class ArtifactRepository:
    """Append-only store of node feedback plus every topology version.

    Entries never change after append. Only their status moves, along
    COMMITTED -> SUPERSEDED | DISCARDED; FAILED and the other states are
    terminal.
    """

    entries: list[RepoEntry] = field(default_factory=list)
    topologies: list[TaskGraph] = field(default_factory=list)
    final_answer: str | None = None
    transitions: list[tuple[int, EntryStatus, EntryStatus]] = field(default_factory=list)
    _status: list[EntryStatus] = field(default_factory=list, repr=False)

    def record_topology(self, graph: TaskGraph) -> None:
        if graph.version != len(self.topologies):
            raise ValueError(f"topology version {graph.version} out of sequence")
        self.topologies.append(graph)

    def append(self, node: NodeId, feedback: NodeFeedback, version: int) -> RepoEntry:
        if not any(node in g.vertices for g in self.topologies):
            raise ValueError(f"node {node} is not in any recorded topology")
        status = EntryStatus.FAILED if feedback.exception else EntryStatus.COMMITTED
        entry = RepoEntry(len(self.entries), version, node, feedback, status)
        self.entries.append(entry)
        self._status.append(status)
        return entry

    def status(self, index: int) -> EntryStatus:
        return self._status[index]

    def transition(self, index: int, new: EntryStatus) -> None:
        old = self._status[index]
        if new not in _ALLOWED.get(old, set()):
            raise ValueError(f"entry {index}: illegal transition {old.value} -> {new.value}")
        self._status[index] = new
        self.transitions.append((index, old, new))

    def latest(self, node: NodeId) -> RepoEntry | None:
        for entry in reversed(self.entries):
            if entry.node == node:
                return entry
        return None

    def committed_entry(self, node: NodeId) -> RepoEntry | None:
        entry = self.latest(node)
        if entry is not None and self._status[entry.index] is EntryStatus.COMMITTED:
            return entry
        return None

    def payload(self, node: NodeId) -> Payload:
        entry = self.committed_entry(node)
        if entry is None:
            raise LookupError(f"no committed artifact for {node}")
        return Payload(node, entry.feedback.output, entry.index)

    def with_status(self, *statuses: EntryStatus) -> list[RepoEntry]:
        return [e for e in self.entries if self._status[e.index] in statuses]

    def tokens(self) -> int:
        return sum(e.feedback.tokens for e in self.entries)

    def to_list(self) -> list[dict[str, Any]]:
        return [
            {
                "index": e.index,
                "version": e.version,
                "node": str(e.node),
                "status": self._status[e.index].value,
                "digest": e.digest,
                "feedback": e.feedback.to_dict(),
            }
            for e in self.entries
        ]
