from __future__ import annotations

import copy
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import E, L, R, chain, n, ok, vx
from healdag.config import BudgetConfig, EngineConfig, ExpertsConfig, config_from_dict
from healdag.engine import (
    RunResult,
    RunStatus,
    build_experts,
    replay,
    run,
    run_files,
    run_recorded,
    strict_isolation_check,
)
from healdag.errors import (
    ConfigError,
    ExpertUnavailableError,
    MissingFixtureError,
    ReplayMismatchError,
)
from healdag.experts import ExpertCall, LogicOutput, NodeFeedback, RemoteExpert
from healdag.graph import NodeId, TaskGraph, validate
from healdag.reconstructor import ScriptedPlanner


def scripted(graph, table, config=None):
    config = config or EngineConfig()
    return run(graph.query, ScriptedPlanner(graph, 10, 5, 0.5), build_experts(config, table), config)


# -- worked example ---------------------------------------------------------


def test_abs_equation_end_to_end(abs_paths, abs_docs):
    result = run_files(abs_paths["graph"], abs_paths["scenario"], abs_paths["config"])
    assert result.status is RunStatus.COMPLETED
    assert result.answer == abs_docs["scenario"]["v4"][0]["output"]["draft"]
    assert [(r["action"], r["node"]) for r in result.repair_log] == [("PATCH", "v2")]
    assert not any(r["action"] == "RECONSTRUCT" for r in result.repair_log)
    final = result.final_graph
    assert n("v2_patch") in final.vertices and n("v2") in final.failed
    assert final[n("v3")].parents == (n("v1"), n("v2_patch"))
    assert strict_isolation_check(result)


def test_abs_equation_byte_identical(abs_paths):
    a = run_files(abs_paths["graph"], abs_paths["scenario"], abs_paths["config"]).dumps()
    b = run_files(abs_paths["graph"], abs_paths["scenario"], abs_paths["config"]).dumps()
    assert a == b


def test_patch_repair_context_points_at_failed_entry(abs_paths):
    result = run_files(abs_paths["graph"], abs_paths["scenario"], abs_paths["config"])
    patch_call = next(c for c in result.calls if c["node"] == "v2_patch")
    entry = result.repository[patch_call["repair_entry"]]
    assert entry["node"] == "v2" and entry["status"] == "FAILED"


def test_metric_conservation(abs_paths):
    r = run_files(abs_paths["graph"], abs_paths["scenario"], abs_paths["config"])
    repo_tokens = sum(e["feedback"]["tokens_prompt"] + e["feedback"]["tokens_completion"] for e in r.repository)
    assert r.metrics.tokens_total == repo_tokens + r.metrics.planner_tokens
    assert r.metrics.tflops == pytest.approx(2 * 8e9 * r.metrics.tokens_total / 1e12)
    expected_latency = r.metrics.expert_seconds + r.metrics.planner_seconds + r.metrics.switch_seconds
    assert r.metrics.latency_seconds == pytest.approx(expected_latency)
    wall = sum(e["feedback"]["wall_time"] for e in r.repository)
    assert r.metrics.expert_seconds == pytest.approx(wall)
    assert r.metrics.suspensions == len(r.repair_log)


def test_repository_consistent_with_topologies(abs_paths):
    r = run_files(abs_paths["graph"], abs_paths["scenario"], abs_paths["config"])
    for e in r.repository:
        g = r.graph_history[e["version"]]
        assert NodeId.parse(e["node"]) in g.vertices
    for g in r.graph_history:
        assert validate(g) == []


# -- happy path and adversarial --------------------------------------------


def happy_table():
    return {"v1": [ok(L)], "v2": [ok(L)], "v3": [ok(E, text="done")]}


def test_happy_path_chain():
    r = scripted(chain(3), happy_table())
    assert r.status is RunStatus.COMPLETED and r.answer == "done"
    assert r.metrics.suspensions == 0
    assert r.metrics.expert_calls == 3 and r.metrics.planner_calls == 1


def test_happy_path_replay_identical():
    graph = chain(3)
    table = {k: [fb.to_dict() for fb in v] for k, v in happy_table().items()}
    r = run_recorded(graph.to_dict(), table, None)
    assert replay(r).dumps() == r.dumps()


def adversarial(omega: int, graph=None):
    graph = graph or chain(3)
    config = EngineConfig(
        budget=BudgetConfig(omega), experts=ExpertsConfig(mode="fault", failure_rate=1.0, seed=1)
    )
    return run(graph.query, ScriptedPlanner(graph), build_experts(config), config), graph


@pytest.mark.parametrize("omega", [1, 3, 5])
def test_adversarial_terminates(omega):
    r, graph = adversarial(omega)
    assert r.status in (RunStatus.DEGRADED, RunStatus.FAILED)
    assert r.metrics.suspensions == omega == len(r.repair_log)
    max_added = max(len(x["added"]) for x in r.repair_log)
    assert r.metrics.expert_calls <= len(graph.vertices) + omega * max_added + 1
    # escalation ladder: a node is patched at most once, a failed patch is rebuilt
    patched = [x["node"] for x in r.repair_log if x["action"] == "PATCH"]
    assert len(patched) == len(set(patched))
    for x in r.repair_log:
        if NodeId.parse(x["node"]).patch:
            assert x["action"] in ("RECONSTRUCT", "FALLBACK")
    assert strict_isolation_check(r)


def test_fallback_is_degraded_when_expert_answers():
    graph = chain(3)
    table = {
        "v1": [ok(L)],
        "v2": [ok(L, 0.1)],
        "v2_patch": [ok(L, 0.1)],
        "v2@2": [ok(L, 0.1)],
        "fallback": [ok(E, text="partial")],
    }
    r = scripted(graph, table, EngineConfig(budget=BudgetConfig(2)))
    assert r.status is RunStatus.DEGRADED and r.answer == "partial"
    fallback_calls = [c for c in r.calls if c["node"] == "fallback"]
    assert len(fallback_calls) == 1
    assert [p["node"] for p in fallback_calls[0]["parent_payloads"]] == ["v1", "v2@2"]


def test_low_confidence_patch_supersedes():
    graph = chain(3)
    table = {"v1": [ok(L)], "v2": [ok(L, 0.2)], "v2_patch": [ok(L, 0.9)], "v3": [ok(E)]}
    r = scripted(graph, table)
    assert r.status is RunStatus.COMPLETED
    statuses = {e["node"]: e["status"] for e in r.repository}
    assert statuses["v2"] == "SUPERSEDED"
    assert r.repair_log[0]["cause"] == "CONFIDENCE_FLOOR"


def test_global_uncertainty_reconstructs_and_discards():
    graph = chain(3)
    table = {
        "v1": [ok(L, 0.5)],
        "v1@1": [ok(L, 0.9)],
        "v2@1": [ok(L, 0.9)],
        "v3@1": [ok(E, 0.9, text="rebuilt")],
    }
    r = scripted(graph, table)
    assert r.repair_log[0]["cause"] == "GLOBAL_UNCERTAINTY"
    assert r.repair_log[0]["action"] == "RECONSTRUCT"
    assert r.repair_log[0]["removed"] == ["v1", "v2", "v3"]
    assert r.status is RunStatus.COMPLETED and r.answer == "rebuilt"
    assert r.repository[0]["status"] == "DISCARDED"


def test_patch_refusal_escalates_to_reconstruct():
    graph = chain(3)
    config = EngineConfig()
    table = {"v1": [ok(L)], "v2": [NodeFeedback(LogicOutput(("x",), (False,)), False, 0.9)], "v2@1": [ok(L)], "v3@1": [ok(E)]}
    planner = ScriptedPlanner(graph, refuse=frozenset({"patch"}))
    r = run(graph.query, planner, build_experts(config, table), config)
    assert r.repair_log[0]["escalated_from"] == "PATCH"
    assert r.repair_log[0]["action"] == "RECONSTRUCT"
    assert r.status is RunStatus.COMPLETED
    assert r.metrics.suspensions == 1


def test_reconstruct_refusal_falls_back():
    graph = chain(3)
    config = EngineConfig()
    table = {"v1": [ok(L, 0.5)], "fallback": [ok(E, text="fb")]}
    planner = ScriptedPlanner(graph, refuse=frozenset({"subgraph"}))
    r = run(graph.query, planner, build_experts(config, table), config)
    assert r.status is RunStatus.DEGRADED and r.answer == "fb"
    assert r.repair_log[-1]["action"] == "FALLBACK"


def test_missing_fixture_raises():
    with pytest.raises(MissingFixtureError):
        scripted(chain(3), {"v1": [ok(L)]})


def test_invalid_plan_rejected():
    g = TaskGraph.build("bad", [vx("v1", L, "v2"), vx("v2", E, "v1")], "v2")
    with pytest.raises(ConfigError):
        scripted(g, {})


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 10**6), st.integers(1, 5), st.integers(2, 6))
def test_termination_property(rate, seed, omega, size):
    graph = chain(size)
    config = EngineConfig(
        budget=BudgetConfig(omega),
        experts=ExpertsConfig(mode="fault", failure_rate=rate, seed=seed, confidence_range=(0.2, 1.0)),
    )
    r = run(graph.query, ScriptedPlanner(graph), build_experts(config), config)
    assert r.status in set(RunStatus)
    assert r.metrics.suspensions <= omega
    if r.status is RunStatus.COMPLETED:
        assert r.answer is not None
    max_added = max((len(x["added"]) for x in r.repair_log), default=0)
    assert r.metrics.expert_calls <= size + omega * max(max_added, 1) + 1
    assert strict_isolation_check(r)
    assert RunResult.from_dict(json.loads(r.dumps())).dumps() == r.dumps()


# -- isolation --------------------------------------------------------------


@pytest.mark.parametrize(
    "forge",
    [
        lambda d: d["calls"][-1]["parent_payloads"][0].pop("entry"),
        lambda d: d["calls"][-1]["parent_payloads"][0].update(digest="0" * 16),
        lambda d: d["calls"][-1]["parent_payloads"][0].update(entry=len(d["repository"]) + 3),
        lambda d: next(c for c in d["calls"] if c["node"] == "v2_patch").update(repair_entry=None),
        lambda d: next(c for c in d["calls"] if c["node"] == "v2_patch").update(repair_entry=0),
    ],
)
def test_isolation_negative_controls(abs_paths, forge):
    doc = run_files(abs_paths["graph"], abs_paths["scenario"], abs_paths["config"]).to_dict()
    forged = copy.deepcopy(doc)
    forge(forged)
    assert strict_isolation_check(doc)
    assert not strict_isolation_check(forged)


# -- replay -----------------------------------------------------------------


def test_replay_identical(abs_paths, tmp_path):
    r = run_files(abs_paths["graph"], abs_paths["scenario"], abs_paths["config"])
    path = tmp_path / "run.json"
    path.write_text(r.dumps())
    again = replay(path)
    assert again.to_dict()["metrics"] == r.to_dict()["metrics"]
    assert again.repair_log == r.repair_log


def test_replay_mismatch_at_first_suspension_decision(abs_paths):
    r = run_files(abs_paths["graph"], abs_paths["scenario"], abs_paths["config"])
    with pytest.raises(ReplayMismatchError) as info:
        replay(r, {"thresholds": {"tau_c": 0.95}})
    first_eval = next(i for i, e in enumerate(r.events) if e["type"] == "evaluate")
    assert info.value.index == first_eval
    assert info.value.expected["cause"]["kind"] == "NONE"
    assert info.value.actual["cause"]["kind"] == "CONFIDENCE_FLOOR"


def test_replay_requires_inputs(abs_paths):
    r = run_files(abs_paths["graph"], abs_paths["scenario"], abs_paths["config"])
    r.inputs = None
    with pytest.raises(ValueError):
        replay(r)


# -- config -----------------------------------------------------------------


@pytest.mark.parametrize(
    "doc",
    [
        {"thresholds": {"tau_x": 0.3}},
        {"nonsense": {}},
        {"budget": {"omega_max": 0}},
        {"adapters": {"hot_load_seconds": 0}},
        {"experts": {"mode": "psychic"}},
        {"experts": {"mode": "remote"}},
        {"thresholds": {"tau_c": 1.5}},
    ],
)
def test_config_errors(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


# -- remote expert ----------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    responses: dict[str, str] = {}

    def do_POST(self):  # noqa: N802
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.server.seen.append(body)  # type: ignore[attr-defined]
        reply = self.responses.get(body["node"], "{}")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(reply.encode())

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    srv.seen = []  # type: ignore[attr-defined]
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def test_remote_expert_round_trip(server):
    _Handler.responses = {
        "v1": json.dumps(
            {"output": {"history": ["a"], "verifications": [True]}, "confidence": 0.8, "exception": False,
             "tokens_prompt": 7, "tokens_completion": 3}
        ),
        "v2": "not json",
        "v3": json.dumps({"output": {"history": ["a"], "verifications": [True]}}),
    }
    url = f"http://127.0.0.1:{server.server_address[1]}/"
    ex = RemoteExpert(L, url, timeout=5, retries=0)
    fb = ex.execute(ExpertCall(vx("v1", L)))
    assert not fb.exception and fb.confidence == 0.8 and fb.tokens == 10
    assert server.seen[0]["instruction"] == "do v1"
    assert set(server.seen[0]) >= {"instruction", "parent_payloads", "repair_context"}
    malformed = ex.execute(ExpertCall(vx("v2", L)))
    assert malformed.exception and malformed.confidence == 0.0
    no_conf = ex.execute(ExpertCall(vx("v3", L)))
    assert no_conf.exception and no_conf.tokens_prompt > 0


def test_remote_expert_unavailable():
    ex = RemoteExpert(R, "http://127.0.0.1:9/", timeout=0.5, retries=1)
    with pytest.raises(ExpertUnavailableError):
        ex.execute(ExpertCall(vx("v1", R)))
