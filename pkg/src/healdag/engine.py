"""Run loop: plan, execute node by node, evaluate, repair, emit.

Execution is strictly sequential. Every payload an expert sees is read
from the artifact repository and tagged with the entry it came from, which
is what ``strict_isolation_check`` audits afterwards.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from healdag.adapters import AdapterScheduler, Module
from healdag.config import EngineConfig, config_from_dict
from healdag.errors import (
    ConfigError,
    HealdagError,
    InvalidDeltaError,
    PlannerRefusalError,
    ReplayMismatchError,
)
from healdag.evaluator import SuspensionCause, check_suspension
from healdag.experts import (
    Expert,
    ExpertCall,
    ExprOutput,
    FaultInjectingExpert,
    LogicOutput,
    NodeFeedback,
    RagOutput,
    RemoteExpert,
    ScriptedExpert,
    ScriptedScenario,
    parse_scenario,
    scenario_to_dict,
)
from healdag.graph import ExpertKind, GraphHistory, NodeId, TaskGraph, ready_frontier, validate
from healdag.metrics import RunMetrics, tflops
from healdag.reconstructor import (
    PlannerPort,
    PlannerReply,
    RepairAction,
    RepairBudget,
    ScriptedPlanner,
    build_patch_delta,
    build_reconstruct_delta,
    decide_repair,
    discard_removed,
    fallback_call,
    is_patch_failure,
)
from healdag.repository import ArtifactRepository, EntryStatus, output_digest

log = logging.getLogger(__name__)

RUN_FORMAT = "healdag-run/1"


class RunStatus(str, Enum):
    COMPLETED = "COMPLETED"
    DEGRADED = "DEGRADED"
    FAILED = "FAILED"


EXIT_CODES = {RunStatus.COMPLETED: 0, RunStatus.DEGRADED: 2, RunStatus.FAILED: 3}
EXIT_CONFIG_ERROR = 64


class PlanRejectedError(ConfigError):
    code = "PLAN_REJECTED"


@dataclass
class RunResult:
    status: RunStatus
    answer: str | None
    metrics: RunMetrics
    repair_log: list[dict[str, Any]]
    graph_history: list[TaskGraph]
    events: list[dict[str, Any]] = field(default_factory=list)
    calls: list[dict[str, Any]] = field(default_factory=list)
    repository: list[dict[str, Any]] = field(default_factory=list)
    memory_trace: list[dict[str, Any]] = field(default_factory=list)
    inputs: dict[str, Any] | None = None

    @property
    def final_graph(self) -> TaskGraph:
        return self.graph_history[-1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": RUN_FORMAT,
            "status": self.status.value,
            "answer": self.answer,
            "metrics": self.metrics.to_dict(),
            "repair_log": self.repair_log,
            "graph_history": [g.to_dict() for g in self.graph_history],
            "repository": self.repository,
            "calls": self.calls,
            "events": self.events,
            "memory_trace": self.memory_trace,
            "inputs": self.inputs,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> RunResult:
        if doc.get("format") != RUN_FORMAT:
            raise ValueError(f"not a run-output document (format {doc.get('format')!r})")
        return cls(
            status=RunStatus(doc["status"]),
            answer=doc["answer"],
            metrics=RunMetrics.from_dict(doc["metrics"]),
            repair_log=list(doc["repair_log"]),
            graph_history=[TaskGraph.from_dict(g) for g in doc["graph_history"]],
            events=list(doc["events"]),
            calls=list(doc["calls"]),
            repository=list(doc["repository"]),
            memory_trace=list(doc.get("memory_trace", [])),
            inputs=doc.get("inputs"),
        )

    @classmethod
    def load(cls, path: str | Path) -> RunResult:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def render_answer(output: Any) -> str:
    """Final answer text for any sink kind."""
    if isinstance(output, ExprOutput):
        return output.draft
    if isinstance(output, RagOutput):
        return " ".join(output.assertions)
    if isinstance(output, LogicOutput):
        verified = [h for h, ok in zip(output.history, output.verifications) if ok]
        return verified[-1] if verified else ""
    raise TypeError(f"cannot render {type(output).__name__}")


class _Run:
    """Mutable state of one execution; discarded once the RunResult is built."""

    def __init__(
        self, planner: PlannerPort, experts: Mapping[ExpertKind, Expert], config: EngineConfig
    ) -> None:
        self.planner = planner
        self.experts = experts
        self.config = config
        self.scheduler = AdapterScheduler(
            config.adapter_specs(), config.backbone_bytes, config.hot_load_seconds
        )
        self.repo = ArtifactRepository()
        self.history = GraphHistory()
        self.budget = RepairBudget(config.budget.omega_max)
        self.clock = 0.0
        self.events: list[dict[str, Any]] = []
        self.calls: list[dict[str, Any]] = []
        self.repair_log: list[dict[str, Any]] = []
        self.expert_calls = 0
        self.planner_calls = 0
        self.planner_tokens = 0
        self.expert_tokens = 0
        self.expert_seconds = 0.0
        self.planner_seconds = 0.0
        self.switch_seconds = 0.0
        self.fallback_tokens = 0

    # -- bookkeeping ------------------------------------------------------

    def emit(self, event_type: str, /, **data: Any) -> None:
        self.events.append({"seq": len(self.events), "type": event_type, **data})

    def switch(self, module: str) -> None:
        cost = self.scheduler.switch(module, self.clock)
        if cost:
            self.emit("switch", to=module, cost=cost, at=round(self.clock, 9))
            self.clock += cost
            self.switch_seconds += cost

    def charge_planner(self, reply: PlannerReply[Any], purpose: str) -> None:
        self.planner_calls += 1
        self.planner_tokens += reply.tokens
        self.planner_seconds += reply.wall_time
        self.clock += reply.wall_time
        self.emit("planner", purpose=purpose, tokens=reply.tokens)

    def call_expert(self, call: ExpertCall) -> NodeFeedback:
        kind = call.vertex.expert_kind
        self.switch(kind.value)
        feedback = self.experts[kind].execute(call)
        self.expert_calls += 1
        self.expert_tokens += feedback.tokens
        self.expert_seconds += feedback.wall_time
        self.clock += feedback.wall_time
        record = call.to_dict()
        for p, rec in zip(call.parent_payloads, record["parent_payloads"]):
            rec["digest"] = output_digest(p.output)
        self.calls.append(record)
        self.emit(
            "execute",
            node=str(call.vertex.id),
            kind=kind.value,
            exception=feedback.exception,
            confidence=feedback.confidence,
            tokens=feedback.tokens,
        )
        return feedback

    # -- phases -------------------------------------------------------------

    def plan(self, query: str) -> None:
        self.switch(Module.PLAN.value)
        reply = self.planner.initial_plan(query)
        self.charge_planner(reply, "initial_plan")
        graph = reply.value
        report = validate(graph)
        if report:
            codes = ", ".join(f"{v.code}({v.node or v.detail})" for v in report)
            raise PlanRejectedError(f"initial plan rejected: {codes}")
        if graph.version != 0:
            graph = TaskGraph(graph.query, graph.vertices, graph.sink, 0, graph.failed)
        self.history.start(graph)
        self.repo.record_topology(graph)
        for kind in {v.expert_kind for v in graph.vertices.values()}:
            if kind not in self.experts:
                raise ConfigError(f"no expert registered for kind {kind.value}")

    def live(self) -> list[tuple[NodeId, NodeFeedback]]:
        """Evaluated set: latest entry of each live vertex, if committed or failed."""
        graph = self.history.current
        out = []
        for node in graph.vertices:
            if node in graph.failed:
                continue
            entry = self.repo.latest(node)
            if entry is None:
                continue
            if self.repo.status(entry.index) in (EntryStatus.COMMITTED, EntryStatus.FAILED):
                out.append((node, entry.feedback))
        return out

    def committed_nodes(self) -> set[NodeId]:
        graph = self.history.current
        return {n for n in graph.vertices if self.repo.committed_entry(n) is not None}

    def execute_next(self) -> bool:
        """Run one frontier node. Returns False when nothing is ready."""
        graph = self.history.current
        frontier = ready_frontier(graph, self.committed_nodes())
        if not frontier:
            return False
        node = frontier[0]
        vertex = graph[node]
        payloads = tuple(self.repo.payload(p) for p in vertex.parents)
        repair_context = repair_entry = None
        if node.patch:
            origin = self._patch_origin(node)
            entry = self.repo.latest(origin) if origin is not None else None
            if entry is not None:
                repair_entry = entry.index
                repair_context = json.dumps(entry.feedback.to_dict(), sort_keys=True)
        call = ExpertCall(vertex, payloads, repair_context, repair_entry, graph.query)
        feedback = self.call_expert(call)
        self.repo.append(node, feedback, graph.version)
        return True

    def _patch_origin(self, patch: NodeId) -> NodeId | None:
        for entry in reversed(self.repair_log):
            if entry["action"] == RepairAction.PATCH.value and str(patch) in entry["added"]:
                return NodeId.parse(entry["node"])
        return None

    def evaluate(self) -> SuspensionCause:
        graph = self.history.current
        cause = check_suspension(self.live(), self.config.thresholds, graph.topological_ranks())
        self.emit("evaluate", cause=cause.to_dict())
        return cause

    def repair(self, cause: SuspensionCause) -> RepairAction:
        """Handle one suspension. Returns the action that took effect."""
        node = cause.offending_node
        assert node is not None
        action = decide_repair(cause, is_patch_failure(node), self.budget)
        if action is RepairAction.FALLBACK:
            return action
        self.budget.charge()
        record: dict[str, Any] = {
            "step": len(self.repair_log),
            "version": self.history.current.version,
            "cause": cause.kind.value,
            "node": str(node),
            "action": action.value,
            "escalated_from": None,
            "removed": [],
            "added": [],
        }
        if action is RepairAction.PATCH:
            try:
                self._patch(cause, record)
                return self._log(record)
            except (PlannerRefusalError, InvalidDeltaError) as exc:
                log.info("patch of %s failed (%s); escalating", node, exc)
                record["escalated_from"] = RepairAction.PATCH.value
                record["action"] = RepairAction.RECONSTRUCT.value
        try:
            self._reconstruct(cause, record)
        except (PlannerRefusalError, InvalidDeltaError) as exc:
            log.info("reconstruction from %s failed (%s); falling back", node, exc)
            record["action"] = RepairAction.FALLBACK.value
            record["error"] = str(exc)
            self._log(record)
            return RepairAction.FALLBACK
        return self._log(record)

    def _log(self, record: dict[str, Any]) -> RepairAction:
        self.repair_log.append(record)
        self.emit("repair", **{k: v for k, v in record.items() if k != "step"})
        return RepairAction(record["action"])

    def _planner_step(self, builder: Any, cause: SuspensionCause, **kw: Any) -> Any:
        self.switch(Module.PLAN.value)
        graph = self.history.current
        generation = len(self.history)
        assert cause.offending_node is not None
        try:
            delta, reply = builder(
                graph, cause.offending_node, self.planner, self.repo, cause, generation, **kw
            )
        except PlannerRefusalError as exc:
            reply = getattr(exc, "reply", None)
            if reply is not None:
                self.charge_planner(reply, builder.__name__)
            raise
        self.charge_planner(reply, builder.__name__)
        return delta

    def _patch(self, cause: SuspensionCause, record: dict[str, Any]) -> None:
        delta = self._planner_step(build_patch_delta, cause)
        graph = self.history.apply(delta, self.committed_nodes())
        self.repo.record_topology(graph)
        entry = self.repo.latest(delta.failed)
        if entry is not None and self.repo.status(entry.index) is EntryStatus.COMMITTED:
            self.repo.transition(entry.index, EntryStatus.SUPERSEDED)
        record["added"] = [str(v.id) for v in delta.added]

    def _reconstruct(self, cause: SuspensionCause, record: dict[str, Any]) -> None:
        delta = self._planner_step(
            build_reconstruct_delta,
            cause,
            replacement_size_cap=self.config.budget.replacement_size_cap,
        )
        graph = self.history.apply(delta, self.committed_nodes() - delta.removed)
        self.repo.record_topology(graph)
        discard_removed(self.repo, delta.removed)
        record["removed"] = sorted(str(n) for n in delta.removed)
        record["added"] = [str(v.id) for v in delta.added]

    def fallback(self) -> tuple[RunStatus, str | None]:
        call = fallback_call(self.history.current, self.repo)
        self.emit("fallback", eta=self.budget.eta)
        feedback = self.call_expert(call)
        self.fallback_tokens += feedback.tokens
        if feedback.exception or not isinstance(feedback.output, ExprOutput):
            return RunStatus.FAILED, None
        return RunStatus.DEGRADED, feedback.output.draft

    def loop(self) -> tuple[RunStatus, str | None]:
        while True:
            graph = self.history.current
            sink_entry = self.repo.committed_entry(graph.sink)
            if sink_entry is not None:
                self.emit("complete", sink=str(graph.sink))
                return RunStatus.COMPLETED, render_answer(sink_entry.feedback.output)
            if not self.execute_next():
                raise RuntimeError(f"scheduler stalled at graph version {graph.version}")
            cause = self.evaluate()
            while cause.suspend:
                action = self.repair(cause)
                if action is RepairAction.FALLBACK:
                    return self.fallback()
                cause = self.evaluate()

    def result(self, status: RunStatus, answer: str | None) -> RunResult:
        tokens = self.expert_tokens + self.planner_tokens
        self.repo.final_answer = answer
        metrics = RunMetrics(
            tokens_total=tokens,
            tflops=tflops(tokens, self.config.backbone),
            latency_seconds=self.expert_seconds + self.planner_seconds + self.switch_seconds,
            peak_memory_bytes=self.scheduler.peak,
            suspensions=self.budget.eta,
            expert_calls=self.expert_calls,
            planner_calls=self.planner_calls,
            planner_tokens=self.planner_tokens,
            expert_seconds=self.expert_seconds,
            planner_seconds=self.planner_seconds,
            switch_seconds=self.switch_seconds,
            latency_mode="measured" if self.config.experts.mode == "remote" else "simulated",
        )
        trace = [
            {"timestamp": t, "loaded": m, "footprint_bytes": b} for t, m, b in self.scheduler.trace()
        ]
        return RunResult(
            status=status,
            answer=answer,
            metrics=metrics,
            repair_log=self.repair_log,
            graph_history=list(self.history.versions),
            events=self.events,
            calls=self.calls,
            repository=self.repo.to_list(),
            memory_trace=trace,
        )


def run(
    query: str,
    planner: PlannerPort,
    experts: Mapping[ExpertKind, Expert],
    config: EngineConfig | None = None,
) -> RunResult:
    """Execute one query end to end."""
    state = _Run(planner, experts, config or EngineConfig())
    state.plan(query)
    status, answer = state.loop()
    return state.result(status, answer)


def build_experts(
    config: EngineConfig, scenario: Mapping[str, Sequence[NodeFeedback]] | None = None
) -> dict[ExpertKind, Expert]:
    ex = config.experts
    if ex.mode == "scripted":
        shared = ScriptedScenario(scenario or {})
        return {k: ScriptedExpert(k, shared) for k in ExpertKind}
    if ex.mode == "fault":
        return {
            k: FaultInjectingExpert(
                k,
                failure_rate=ex.failure_rate,
                seed=ex.seed,
                confidence_range=ex.confidence_range,
                tokens_per_call=ex.tokens_per_call,
                wall_time=ex.wall_time,
            )
            for k in ExpertKind
        }
    return {
        k: RemoteExpert(k, ex.endpoints[k.value], ex.timeout, ex.retries) for k in ExpertKind
    }


def scripted_planner(graph: TaskGraph, config: EngineConfig) -> ScriptedPlanner:
    sc = config.scenario
    return ScriptedPlanner(
        graph,
        tokens_prompt=sc.planner_tokens_prompt,
        tokens_completion=sc.planner_tokens_completion,
        wall_time=sc.planner_wall_time,
        patch_kinds={k: ExpertKind(v) for k, v in sc.patch_kinds.items()},
    )


def _prepare(
    graph_doc: Mapping[str, Any],
    scenario_doc: Mapping[str, Any] | None,
    config_doc: Mapping[str, Any] | None,
) -> tuple[TaskGraph, dict[str, list[NodeFeedback]], EngineConfig]:
    config = config_from_dict(config_doc or {})
    try:
        graph = TaskGraph.from_dict(graph_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad graph document: {exc}") from exc
    table = parse_scenario(json.dumps(scenario_doc)) if scenario_doc else {}
    return graph, table, config


def _inputs(graph: TaskGraph, table: Mapping[str, Sequence[NodeFeedback]], config: EngineConfig) -> dict[str, Any]:
    return {"graph": graph.to_dict(), "scenario": scenario_to_dict(table), "config": config.to_dict()}


def run_recorded(
    graph_doc: Mapping[str, Any],
    scenario_doc: Mapping[str, Any] | None,
    config_doc: Mapping[str, Any] | None,
) -> RunResult:
    """Run from plain documents and embed them so the output can be replayed."""
    graph, table, config = _prepare(graph_doc, scenario_doc, config_doc)
    result = run(graph.query, scripted_planner(graph, config), build_experts(config, table), config)
    result.inputs = _inputs(graph, table, config)
    return result


def run_files(
    graph_path: str | Path, scenario_path: str | Path | None, config_path: str | Path | None
) -> RunResult:
    try:
        graph_doc = json.loads(Path(graph_path).read_text(encoding="utf-8"))
        config_doc = (
            json.loads(Path(config_path).read_text(encoding="utf-8")) if config_path else None
        )
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc)) from exc
    scenario_doc = None
    if scenario_path:
        text = Path(scenario_path).read_text(encoding="utf-8")
        # validate with line diagnostics before anything runs
        parse_scenario(text, str(scenario_path))
        scenario_doc = json.loads(text) if text.strip() else None
    return run_recorded(graph_doc, scenario_doc, config_doc)


def replay(
    recorded: RunResult | str | Path, config_override: Mapping[str, Any] | None = None
) -> RunResult:
    """Re-execute a recorded scripted run and demand an identical outcome.

    ``config_override`` is merged section by section into the recorded
    config, which is how a reviewer can ask "would this run have gone the
    same way under other thresholds".
    """
    if not isinstance(recorded, RunResult):
        recorded = RunResult.load(recorded)
    if recorded.inputs is None:
        raise ValueError("run output carries no recorded inputs; only scripted runs replay")
    inputs = recorded.inputs
    config_doc = json.loads(json.dumps(inputs["config"]))
    for section, values in (config_override or {}).items():
        config_doc.setdefault(section, {}).update(values)
    graph, table, config = _prepare(inputs["graph"], inputs["scenario"] or None, config_doc)
    state = _Run(scripted_planner(graph, config), build_experts(config, table), config)
    try:
        state.plan(graph.query)
        status, answer = state.loop()
    except HealdagError as exc:
        # the re-run could not finish; report where it left the recorded path
        recorded_events = recorded.to_dict()["events"]
        for i, (a, b) in enumerate(zip(recorded_events, state.events)):
            if a != b:
                raise ReplayMismatchError(i, a, b) from exc
        i = len(state.events)
        expected_event = recorded_events[i] if i < len(recorded_events) else None
        raise ReplayMismatchError(i, expected_event, {"type": "error", "code": exc.code, "message": str(exc)}) from exc
    fresh = state.result(status, answer)
    fresh.inputs = _inputs(graph, table, config)
    expected, actual = recorded.to_dict(), fresh.to_dict()
    for i, (a, b) in enumerate(zip(expected["events"], actual["events"])):
        if a != b:
            raise ReplayMismatchError(i, a, b)
    if len(expected["events"]) != len(actual["events"]):
        i = min(len(expected["events"]), len(actual["events"]))
        raise ReplayMismatchError(
            i,
            expected["events"][i] if i < len(expected["events"]) else None,
            actual["events"][i] if i < len(actual["events"]) else None,
        )
    expected["inputs"]["config"] = actual["inputs"]["config"]
    for key in expected:
        if expected[key] != actual[key]:
            raise ReplayMismatchError(len(expected["events"]), {key: expected[key]}, {key: actual[key]})
    return fresh


def strict_isolation_check(trace: RunResult | Mapping[str, Any]) -> bool:
    """True iff every expert input was materialized from a repository entry.

    Checks each recorded call: every parent payload carries an entry tag
    that exists, belongs to that parent, was committed, precedes the call,
    and has the same output digest; patch repair context must come from an
    entry of the node being patched.
    """
    doc = trace.to_dict() if isinstance(trace, RunResult) else trace
    entries = doc.get("repository", [])
    calls = doc.get("calls", [])
    executed = 0
    for call in calls:
        node = call.get("node")
        for p in call.get("parent_payloads", []):
            idx = p.get("entry")
            if not isinstance(idx, int) or not 0 <= idx < len(entries):
                return False
            entry = entries[idx]
            if entry["node"] != p.get("node") or entry["digest"] != p.get("digest"):
                return False
            if entry["feedback"]["exception"]:
                return False
            if node != "fallback" and idx >= executed:
                return False
        repair = call.get("repair_entry")
        if repair is not None:
            if not isinstance(repair, int) or not 0 <= repair < len(entries):
                return False
            if NodeId.parse(entries[repair]["node"]).id != NodeId.parse(node).id:
                return False
        elif node is not None and node != "fallback" and NodeId.parse(node).patch:
            return False
        if node != "fallback":
            executed += 1
    return True
