from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import pytest

from healdag.experts import ExprOutput, LogicOutput, NodeFeedback, RagOutput
from healdag.graph import ExpertKind, NodeId, TaskGraph, Vertex

L, R, E = ExpertKind.LOGIC, ExpertKind.RAG, ExpertKind.EXPR


def n(text: str) -> NodeId:
    return NodeId.parse(text)


def vx(node: str, kind: ExpertKind, *parents: str) -> Vertex:
    return Vertex(n(node), kind, f"do {node}", tuple(n(p) for p in parents))


def chain(k: int = 4, query: str = "chain") -> TaskGraph:
    verts = [vx("v1", L)] + [vx(f"v{i}", L, f"v{i - 1}") for i in range(2, k)]
    verts.append(vx(f"v{k}", E, f"v{k - 1}"))
    return TaskGraph.build(query, verts, f"v{k}")


def diamond() -> TaskGraph:
    return TaskGraph.build(
        "diamond",
        [vx("v1", R), vx("v2", L, "v1"), vx("v3", L, "v1"), vx("v4", E, "v2", "v3")],
        "v4",
    )


def fig3() -> TaskGraph:
    return TaskGraph.build(
        "abs",
        [vx("v1", L), vx("v2", L), vx("v3", L, "v1", "v2"), vx("v4", E, "v3")],
        "v4",
    )


def ok(kind: ExpertKind, confidence: float = 0.9, tokens: int = 10, text: str = "ok") -> NodeFeedback:
    output = {
        ExpertKind.RAG: RagOutput((text,), (), ()),
        ExpertKind.LOGIC: LogicOutput((text,), (True,)),
        ExpertKind.EXPR: ExprOutput(text),
    }[kind]
    return NodeFeedback(output, False, confidence, tokens, tokens, 0.5)


def bad(kind: ExpertKind, tokens: int = 10) -> NodeFeedback:
    return NodeFeedback(ok(kind).output, True, 0.0, tokens, 0, 0.5)


SCENARIO_DIR = Path(str(resources.files("healdag") / "scenarios"))


@pytest.fixture
def abs_paths() -> dict[str, Path]:
    return {
        "graph": SCENARIO_DIR / "abs_equation.graph.json",
        "scenario": SCENARIO_DIR / "abs_equation.scenario.json",
        "config": SCENARIO_DIR / "abs_equation.config.json",
    }


@pytest.fixture
def abs_docs(abs_paths) -> dict[str, dict]:
    return {k: json.loads(p.read_text()) for k, p in abs_paths.items()}
