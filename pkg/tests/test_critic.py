from __future__ import annotations

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import E, L, chain, n, vx
from healdag.critic import (
    CompletionGrader,
    CriticConfig,
    ExactMatchGrader,
    ScoreRow,
    SupportedRatioGrader,
    Trajectory,
    grade_supported_ratio,
    legality,
    reward,
    score,
    score_report,
    split_propositions,
    trajectory_from_run,
)
from healdag.engine import run_files
from healdag.experts import Evidence, ExprOutput, NodeFeedback, RagOutput
from healdag.graph import TaskGraph


class Fixed:
    def __init__(self, phi: float) -> None:
        self.phi = phi

    def grade(self, trajectory: Trajectory) -> float:
        return self.phi


def traj(nodes: int, eta: int, legal: bool = True, **kw) -> Trajectory:
    flags = (True,) * (nodes - 1) + (legal,)
    return Trajectory("q", (chain(max(nodes, 2)),), nodes, eta, "a", flags, **kw)


# -- legality ---------------------------------------------------------------


def test_legal_vertex():
    g = chain(3)
    assert legality(g[n("v2")], g, {"v2": L})


def test_cycle_vertex_illegal():
    g = TaskGraph.build("c", [vx("v1", L, "v2"), vx("v2", L, "v1"), vx("v3", E, "v2")], "v3")
    assert not legality(g[n("v1")], g)
    assert legality(g[n("v3")], g)


def test_assignment_mismatch_illegal():
    g = chain(3)
    assert not legality(g[n("v2")], g, {"v2": E})


# -- reward -----------------------------------------------------------------


def test_reward_examples():
    assert reward(traj(4, 0), CriticConfig(0.0, 0.0, Fixed(1.0))) == 1.0
    r = reward(traj(4, 1, legal=False), CriticConfig(0.1, 2.0, Fixed(0.9)))
    assert r == pytest.approx(-0.1 * math.log(7), abs=1e-12)
    assert round(r, 4) == -0.1946
    r = reward(traj(5, 1), CriticConfig(0.05, 1.0, Fixed(0.8)))
    assert r == pytest.approx(0.8 - 0.05 * math.log(7), abs=1e-12)
    assert round(r, 4) == 0.7027


@given(st.floats(0, 1), st.integers(1, 50), st.integers(0, 10))
def test_veto_dominance(phi, nodes, eta):
    cfg = CriticConfig(0.1, 2.0, Fixed(phi))
    base = CriticConfig(0.1, 2.0, Fixed(0.0))
    assert reward(traj(nodes, eta, legal=False), cfg) == reward(traj(nodes, eta, legal=False), base)


@given(st.floats(0, 1), st.integers(1, 50), st.integers(0, 10), st.floats(0.01, 2), st.floats(0.01, 3))
def test_penalty_monotone(phi, nodes, eta, lam, gamma):
    cfg = CriticConfig(lam, gamma, Fixed(phi))
    assert reward(traj(nodes + 1, eta), cfg) < reward(traj(nodes, eta), cfg)
    assert reward(traj(nodes, eta + 1), cfg) < reward(traj(nodes, eta), cfg)


def test_sublinear_penalty():
    cfg = CriticConfig(0.1, 2.0, Fixed(1.0))
    values = [reward(traj(v, 1), cfg) for v in range(1, 1002)]
    marginal = [a - b for a, b in zip(values, values[1:])]
    assert all(m2 < m1 for m1, m2 in zip(marginal, marginal[1:]))


@given(st.floats(0, 1), st.integers(1, 50), st.integers(0, 10))
def test_lambda_zero_is_gated_phi(phi, nodes, eta):
    assert reward(traj(nodes, eta), CriticConfig(0.0, 1.0, Fixed(phi))) == phi


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory("q", (chain(2),), 0, 0, None, ())
    with pytest.raises(ValueError):
        Trajectory("q", (chain(2),), 2, 0, None, (True,))
    with pytest.raises(ValueError):
        CriticConfig(-1.0)


# -- graders ----------------------------------------------------------------


EVIDENCE = (Evidence("s1", "Alpha is first."), Evidence("s2", "Beta is second."), Evidence("s3", "Gamma is third."))


def test_supported_ratio_all_supported():
    draft = ExprOutput("A holds [s1]. B holds [s2]. C holds [3]. Alpha is first.")
    assert grade_supported_ratio(draft, EVIDENCE) == 1.0


def test_supported_ratio_with_hallucination():
    draft = ExprOutput("A holds [s1]. B holds [s2]. C holds [3]. D was invented.", ("D was invented.",))
    assert len(split_propositions(draft.draft)) == 4
    assert grade_supported_ratio(draft, EVIDENCE) == pytest.approx(0.65, abs=1e-12)


def test_supported_ratio_empty_and_floor():
    assert grade_supported_ratio(ExprOutput(""), EVIDENCE) == 0.0
    flagged = ExprOutput("X. Y.", ("X.", "Y."), ())
    assert grade_supported_ratio(flagged, EVIDENCE, hallucination_penalty=1.0) == 0.0


def test_unknown_citation_unsupported():
    assert grade_supported_ratio(ExprOutput("Z holds [s9]. Q [7]."), EVIDENCE) == 0.0


def test_supported_ratio_grader_uses_run_feedback():
    fbs = (
        NodeFeedback(RagOutput(("a",), EVIDENCE, ((0, 0),)), confidence=0.9),
        NodeFeedback(ExprOutput("A holds [s1]. Nope."), confidence=0.9),
    )
    t = Trajectory("q", (chain(2),), 2, 0, "x", (True, True), feedbacks=fbs)
    assert SupportedRatioGrader().grade(t) == 0.5


def test_exact_match_and_completion():
    t = traj(3, 0)
    assert ExactMatchGrader({"q": "  A "}).grade(t) == 1.0
    assert ExactMatchGrader({"q": "b"}).grade(t) == 0.0
    assert CompletionGrader().grade(traj(3, 0, status="DEGRADED")) == 0.5


# -- end to end -------------------------------------------------------------


def test_trajectory_from_abs_run(abs_paths, abs_docs):
    result = run_files(abs_paths["graph"], abs_paths["scenario"], abs_paths["config"])
    t = trajectory_from_run(result, trajectory_id="abs")
    # four planned nodes, the patch, and the retained failed v2
    assert t.node_count == 5
    assert t.reconstructions == 1
    assert all(t.per_node_legality)
    key = {t.query: abs_docs["scenario"]["v4"][0]["output"]["draft"]}
    cfg = CriticConfig(0.05, 1.0, ExactMatchGrader(key))
    assert reward(t, cfg) == pytest.approx(1.0 - 0.05 * math.log(7))
    row = score(t, cfg)
    assert row == ScoreRow("abs", 1.0, 1, 5, 1, reward(t, cfg))
    report = score_report([row])
    assert report.splitlines()[0] == "id,phi,legality,nodes,eta,reward"
    assert report.splitlines()[1].startswith("abs,1.0,1,5,1,")
