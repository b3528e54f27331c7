"""Trajectory critic: legality veto times task score, minus a log overhead penalty."""

from __future__ import annotations

import csv
import io
import math
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Protocol

from healdag.experts import Evidence, ExprOutput, NodeFeedback, RagOutput, normalize_text
from healdag.graph import ExpertKind, TaskGraph, Vertex, nodes_on_cycles

if TYPE_CHECKING:
    from healdag.engine import RunResult


@dataclass(frozen=True)
class Trajectory:
    query: str
    graph_history: tuple[TaskGraph, ...]
    node_count: int
    reconstructions: int
    final_answer: str | None
    per_node_legality: tuple[bool, ...]
    feedbacks: tuple[NodeFeedback, ...] = ()
    status: str = "COMPLETED"
    trajectory_id: str = ""

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise ValueError("a trajectory has at least one node")
        if self.reconstructions < 0:
            raise ValueError("reconstructions must be non-negative")
        if len(self.per_node_legality) != self.node_count:
            raise ValueError("per_node_legality must have one entry per node")

    @property
    def final_graph(self) -> TaskGraph:
        return self.graph_history[-1]


class TaskGrader(Protocol):
    def grade(self, trajectory: Trajectory) -> float: ...


def legality(
    vertex: Vertex, graph: TaskGraph, assignment: Mapping[str, ExpertKind] | None = None
) -> bool:
    """False if the vertex sits on a cycle or contradicts the assignment table.

    ``assignment`` maps rendered node ids to the expert kind the plan
    declared for them; nodes absent from the table are unconstrained.
    """
    if vertex.id in nodes_on_cycles(graph):
        return False
    if assignment is not None:
        expected = assignment.get(str(vertex.id))
        if expected is not None and ExpertKind(expected) is not vertex.expert_kind:
            return False
    return True


def trajectory_from_run(
    result: RunResult,
    assignment: Mapping[str, ExpertKind] | None = None,
    trajectory_id: str = "",
) -> Trajectory:
    graph = result.final_graph
    vertices = sorted(graph.vertices.values(), key=lambda v: str(v.id))
    feedbacks = tuple(NodeFeedback.from_dict(e["feedback"]) for e in result.repository)
    return Trajectory(
        query=graph.query,
        graph_history=tuple(result.graph_history),
        node_count=len(vertices),
        reconstructions=result.metrics.suspensions,
        final_answer=result.answer,
        per_node_legality=tuple(legality(v, graph, assignment) for v in vertices),
        feedbacks=feedbacks,
        status=result.status.value,
        trajectory_id=trajectory_id,
    )


# -- graders ----------------------------------------------------------------


@dataclass(frozen=True)
class ExactMatchGrader:
    """1.0 when the final answer matches the key after whitespace/case folding."""

    answer_key: Mapping[str, str]

    def grade(self, trajectory: Trajectory) -> float:
        expected = self.answer_key.get(trajectory.query)
        if expected is None or trajectory.final_answer is None:
            return 0.0
        return 1.0 if normalize_text(trajectory.final_answer) == normalize_text(expected) else 0.0


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_CITATION = re.compile(r"\[([^\[\]]+)\]")


def split_propositions(draft: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_END.split(draft.strip()) if s.strip()]


def _cited(proposition: str, evidence: Sequence[Evidence]) -> bool:
    sources = {e.source for e in evidence if e.source}
    for marker in _CITATION.findall(proposition):
        for ref in (r.strip() for r in marker.split(",")):
            if ref in sources:
                return True
            if ref.isdigit() and 1 <= int(ref) <= len(evidence):
                return True
    body = normalize_text(_CITATION.sub("", proposition)).rstrip(".!?")
    return bool(body) and any(body in normalize_text(e.text) for e in evidence)


def grade_supported_ratio(
    draft_output: ExprOutput, evidence: Sequence[Evidence], hallucination_penalty: float = 0.1
) -> float:
    """Share of draft sentences backed by evidence, minus a penalty per unsupported claim.

    A sentence counts as supported when it carries a ``[source]`` or
    ``[n]`` marker naming provided evidence, or its text occurs inside an
    evidence snippet, and it does not contain any statement listed in
    ``draft_output.unsupported``.
    """
    propositions = split_propositions(draft_output.draft)
    if not propositions:
        return 0.0
    flagged = [normalize_text(u) for u in draft_output.unsupported if u.strip()]
    supported = 0
    for prop in propositions:
        norm = normalize_text(prop)
        if any(u in norm for u in flagged):
            continue
        if _cited(prop, evidence):
            supported += 1
    score = supported / len(propositions) - hallucination_penalty * len(draft_output.unsupported)
    return max(0.0, score)


@dataclass(frozen=True)
class SupportedRatioGrader:
    """Open-ended grader over the final EXPR draft and all RAG evidence in the run."""

    hallucination_penalty: float = 0.1

    def grade(self, trajectory: Trajectory) -> float:
        drafts = [fb.output for fb in trajectory.feedbacks if isinstance(fb.output, ExprOutput)]
        if not drafts:
            return 0.0
        evidence = [
            e
            for fb in trajectory.feedbacks
            if isinstance(fb.output, RagOutput) and not fb.exception
            for e in fb.output.evidence
        ]
        return grade_supported_ratio(drafts[-1], evidence, self.hallucination_penalty)


@dataclass(frozen=True)
class CompletionGrader:
    """Status-only proxy used when no answer key exists (synthetic candidates)."""

    scores: Mapping[str, float] = field(
        default_factory=lambda: {"COMPLETED": 1.0, "DEGRADED": 0.5, "FAILED": 0.0}
    )

    def grade(self, trajectory: Trajectory) -> float:
        return self.scores.get(trajectory.status, 0.0)


# -- reward -----------------------------------------------------------------


@dataclass(frozen=True)
class CriticConfig:
    lam: float = 0.05
    gamma: float = 1.0
    grader: TaskGrader = field(default_factory=CompletionGrader)

    def __post_init__(self) -> None:
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be non-negative")


def overhead_penalty(node_count: int, reconstructions: int, lam: float, gamma: float) -> float:
    return lam * math.log(1 + node_count + gamma * reconstructions)


def reward(traj: Trajectory, cfg: CriticConfig) -> float:
    gate = 1.0 if all(traj.per_node_legality) else 0.0
    task = cfg.grader.grade(traj) if gate else 0.0
    return gate * task - overhead_penalty(traj.node_count, traj.reconstructions, cfg.lam, cfg.gamma)


@dataclass(frozen=True)
class ScoreRow:
    trajectory_id: str
    phi: float
    legality: int
    node_count: int
    eta: int
    reward: float

    def as_dict(self) -> dict[str, Any]:
        return {
            "id": self.trajectory_id,
            "phi": self.phi,
            "legality": self.legality,
            "nodes": self.node_count,
            "eta": self.eta,
            "reward": self.reward,
        }


def score(traj: Trajectory, cfg: CriticConfig) -> ScoreRow:
    return ScoreRow(
        traj.trajectory_id,
        cfg.grader.grade(traj),
        int(all(traj.per_node_legality)),
        traj.node_count,
        traj.reconstructions,
        reward(traj, cfg),
    )


def score_report(rows: Sequence[ScoreRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=["id", "phi", "legality", "nodes", "eta", "reward"], lineterminator="\n"
    )
    writer.writeheader()
    for row in rows:
        writer.writerow(row.as_dict())
    return buf.getvalue()
