"""Expert interface, output schemas, feedback tuple and concrete experts."""

from __future__ import annotations

import json
import logging
import math
import random
import re
import time
import urllib.error
import urllib.request
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Protocol, Union

from healdag.errors import ExpertUnavailableError, MissingFixtureError, ScenarioParseError
from healdag.graph import ExpertKind, NodeId, Vertex

log = logging.getLogger(__name__)


# -- output schemas ---------------------------------------------------------


@dataclass(frozen=True)
class Evidence:
    source: str
    text: str


@dataclass(frozen=True)
class RagOutput:
    assertions: tuple[str, ...] = ()
    evidence: tuple[Evidence, ...] = ()
    citations: tuple[tuple[int, int], ...] = ()

    kind = ExpertKind.RAG

    def problems(self) -> list[str]:
        out = []
        for a, k in self.citations:
            if not (0 <= a < len(self.assertions)) or not (0 <= k < len(self.evidence)):
                out.append(f"citation ({a}, {k}) out of bounds")
        return out


@dataclass(frozen=True)
class LogicOutput:
    history: tuple[str, ...] = ()
    verifications: tuple[bool, ...] = ()

    kind = ExpertKind.LOGIC

    def problems(self) -> list[str]:
        if len(self.history) != len(self.verifications):
            return ["history and verifications differ in length"]
        return []


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class ExprOutput:
    draft: str = ""
    unsupported: tuple[str, ...] = ()
    # statements the expert flags as not appearing verbatim in the draft
    external: tuple[str, ...] = ()

    kind = ExpertKind.EXPR

    def problems(self) -> list[str]:
        draft = normalize_text(self.draft)
        return [
            f"unsupported statement not found in draft: {u!r}"
            for u in self.unsupported
            if u not in self.external and normalize_text(u) not in draft
        ]


ExpertOutput = Union[RagOutput, LogicOutput, ExprOutput]


def empty_output(kind: ExpertKind) -> ExpertOutput:
    return {ExpertKind.RAG: RagOutput, ExpertKind.LOGIC: LogicOutput, ExpertKind.EXPR: ExprOutput}[
        kind
    ]()


def output_to_dict(output: ExpertOutput) -> dict[str, Any]:
    if isinstance(output, RagOutput):
        return {
            "kind": "RAG",
            "assertions": list(output.assertions),
            "evidence": [{"source": e.source, "text": e.text} for e in output.evidence],
            "citations": [list(c) for c in output.citations],
        }
    if isinstance(output, LogicOutput):
        return {
            "kind": "LOGIC",
            "history": list(output.history),
            "verifications": list(output.verifications),
        }
    data: dict[str, Any] = {
        "kind": "EXPR",
        "draft": output.draft,
        "unsupported": list(output.unsupported),
    }
    if output.external:
        data["external"] = list(output.external)
    return data


def output_from_dict(data: Mapping[str, Any]) -> ExpertOutput:
    """Parse a tagged output mapping. Raises ValueError/TypeError/KeyError on bad shape."""
    kind = ExpertKind(data["kind"])
    if kind is ExpertKind.RAG:
        evidence = []
        for e in data.get("evidence", ()):
            if isinstance(e, str):
                evidence.append(Evidence("", e))
            else:
                evidence.append(Evidence(str(e["source"]), str(e["text"])))
        citations = tuple((int(a), int(k)) for a, k in data.get("citations", ()))
        return RagOutput(_strs(data.get("assertions", ())), tuple(evidence), citations)
    if kind is ExpertKind.LOGIC:
        verifs = data.get("verifications", ())
        if not all(isinstance(v, bool) for v in verifs):
            raise TypeError("verifications must be booleans")
        return LogicOutput(_strs(data.get("history", ())), tuple(verifs))
    return ExprOutput(
        str(data.get("draft", "")),
        _strs(data.get("unsupported", ())),
        _strs(data.get("external", ())),
    )


def _strs(items: Any) -> tuple[str, ...]:
    if isinstance(items, str) or not isinstance(items, Sequence):
        raise TypeError("expected a list of strings")
    return tuple(str(x) for x in items)


# -- feedback ---------------------------------------------------------------


@dataclass(frozen=True)
class NodeFeedback:
    output: ExpertOutput
    exception: bool = False
    confidence: float = 1.0
    tokens_prompt: int = 0
    tokens_completion: int = 0
    wall_time: float = 0.0

    @property
    def tokens(self) -> int:
        return self.tokens_prompt + self.tokens_completion

    def to_dict(self) -> dict[str, Any]:
        return {
            "output": output_to_dict(self.output),
            "exception": self.exception,
            "confidence": self.confidence,
            "tokens_prompt": self.tokens_prompt,
            "tokens_completion": self.tokens_completion,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> NodeFeedback:
        return cls(
            output=output_from_dict(data["output"]),
            exception=bool(data.get("exception", False)),
            confidence=float(data.get("confidence", 0.0)),
            tokens_prompt=int(data.get("tokens_prompt", 0)),
            tokens_completion=int(data.get("tokens_completion", 0)),
            wall_time=float(data.get("wall_time", 0.0)),
        )


_CONFIDENCE_LINE = re.compile(r"^\s*\"?confidence\"?\s*[:=]\s*(\S+?)\s*,?\s*$", re.M | re.I)


def parse_confidence(raw: Any) -> tuple[float, bool]:
    """Read a self-reported confidence.

    Accepts a bare number, a JSON object with a ``confidence`` key, or text
    with a ``confidence: <decimal>`` line. Returns ``(value, ok)``; a missing
    or malformed field yields ``(0.0, False)`` and the caller must raise the
    exception flag. Out-of-range numbers are clamped into [0, 1].
    """
    value: Any = raw
    if isinstance(raw, Mapping):
        if "confidence" not in raw:
            return 0.0, False
        value = raw["confidence"]
    elif isinstance(raw, str):
        stripped = raw.strip()
        try:
            doc = json.loads(stripped)
        except ValueError:
            match = _CONFIDENCE_LINE.search(raw)
            if match is None:
                return 0.0, False
            value = match.group(1)
        else:
            if isinstance(doc, Mapping):
                return parse_confidence(doc)
            return 0.0, False
    if isinstance(value, bool) or value is None:
        return 0.0, False
    try:
        number = float(value)
    except (TypeError, ValueError):
        return 0.0, False
    if math.isnan(number):
        return 0.0, False
    if number < 0.0 or number > 1.0:
        clamped = min(1.0, max(0.0, number))
        log.warning("confidence %r outside [0, 1]; clamped to %s", value, clamped)
        return clamped, True
    return number, True


def normalize_feedback(feedback: NodeFeedback, kind: ExpertKind) -> NodeFeedback:
    """Enforce the feedback invariants on whatever an expert returned."""
    confidence, ok = parse_confidence(feedback.confidence)
    exception = feedback.exception or not ok
    output = feedback.output
    if output.kind is not kind or output.problems():
        if output.kind is not kind:
            log.warning("expert returned %s output for a %s node", output.kind.value, kind.value)
        exception = True
    elif isinstance(output, LogicOutput) and not all(output.verifications):
        exception = True
    if confidence != feedback.confidence or exception != feedback.exception:
        return replace(feedback, confidence=confidence, exception=exception)
    return feedback


# -- calls and experts ------------------------------------------------------


@dataclass(frozen=True)
class Payload:
    """A parent context handed to an expert, tagged with its repository entry."""

    node: NodeId
    output: ExpertOutput
    entry: int | None = None


@dataclass(frozen=True)
class ExpertCall:
    vertex: Vertex
    parent_payloads: tuple[Payload, ...] = ()
    repair_context: str | None = None
    repair_entry: int | None = None
    query: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "node": str(self.vertex.id),
            "expert_kind": self.vertex.expert_kind.value,
            "parent_payloads": [
                {"node": str(p.node), "entry": p.entry} for p in self.parent_payloads
            ],
            "repair_entry": self.repair_entry,
        }


class Expert(Protocol):
    kind: ExpertKind

    def execute(self, call: ExpertCall) -> NodeFeedback: ...


def _check_kind(expert: Expert, call: ExpertCall) -> None:
    if call.vertex.expert_kind is not expert.kind:
        raise ValueError(
            f"{expert.kind.value} expert cannot run {call.vertex.expert_kind.value} "
            f"node {call.vertex.id}"
        )


# -- scripted scenarios -----------------------------------------------------

_FEEDBACK_FIELDS = ("output", "exception", "confidence", "tokens_prompt", "tokens_completion", "wall_time")


class _DuplicateKey(Exception):
    def __init__(self, key: str) -> None:
        self.key = key


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    seen: dict[str, Any] = {}
    for key, value in pairs:
        if key in seen:
            raise _DuplicateKey(key)
        seen[key] = value
    return seen


def _line_of_second(text: str, key: str) -> int:
    needle = json.dumps(key)
    first = text.find(needle)
    second = text.find(needle, first + 1)
    pos = second if second >= 0 else first
    return text.count("\n", 0, max(pos, 0)) + 1


def parse_scenario(text: str, source: str = "<scenario>") -> dict[str, list[NodeFeedback]]:
    """Parse scenario fixture text into ``{rendered node id: [feedback, ...]}``."""
    if not text.strip():
        return {}
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except _DuplicateKey as dup:
        line = _line_of_second(text, dup.key)
        raise ScenarioParseError(f"{source}:{line}: duplicate node id {dup.key!r}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{source}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ScenarioParseError(f"{source}: top level must be a map of node id to records")
    table: dict[str, list[NodeFeedback]] = {}
    for node, records in doc.items():
        try:
            NodeId.parse(node)
        except ValueError as exc:
            raise ScenarioParseError(f"{source}: {node}: {exc}") from None
        if not isinstance(records, list):
            raise ScenarioParseError(f"{source}: {node}: expected a list of feedback records")
        parsed = []
        for i, rec in enumerate(records):
            where = f"{source}: {node}[{i}]"
            if not isinstance(rec, dict):
                raise ScenarioParseError(f"{where}: record must be a map")
            unknown = set(rec) - set(_FEEDBACK_FIELDS)
            if unknown:
                raise ScenarioParseError(f"{where}: unknown field(s) {sorted(unknown)}")
            if "output" not in rec:
                raise ScenarioParseError(f"{where}.output: missing")
            for name in ("tokens_prompt", "tokens_completion"):
                v = rec.get(name, 0)
                if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                    raise ScenarioParseError(f"{where}.{name}: expected a non-negative integer")
            wall = rec.get("wall_time", 0.0)
            if isinstance(wall, bool) or not isinstance(wall, (int, float)) or wall < 0:
                raise ScenarioParseError(f"{where}.wall_time: expected seconds >= 0")
            if not isinstance(rec.get("exception", False), bool):
                raise ScenarioParseError(f"{where}.exception: expected a boolean")
            try:
                output = output_from_dict(rec["output"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ScenarioParseError(f"{where}.output: {exc}") from None
            confidence, ok = parse_confidence(rec) if "confidence" in rec else (0.0, False)
            parsed.append(
                NodeFeedback(
                    output=output,
                    exception=rec.get("exception", False) or not ok,
                    confidence=confidence,
                    tokens_prompt=rec.get("tokens_prompt", 0),
                    tokens_completion=rec.get("tokens_completion", 0),
                    wall_time=float(wall),
                )
            )
        table[node] = parsed
    return table


def load_scripted_scenario(path: str | Path) -> dict[str, list[NodeFeedback]]:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), str(path))


def scenario_to_dict(table: Mapping[str, Sequence[NodeFeedback]]) -> dict[str, Any]:
    return {node: [fb.to_dict() for fb in seq] for node, seq in table.items()}


@dataclass
class ScriptedScenario:
    """Fixture table shared by the scripted experts of one run.

    The k-th consultation of a node returns its k-th record.
    """

    table: Mapping[str, Sequence[NodeFeedback]]
    consulted: dict[str, int] = field(default_factory=dict)

    def next_for(self, node: NodeId) -> NodeFeedback:
        key = str(node)
        records = self.table.get(key)
        k = self.consulted.get(key, 0)
        if records is None or k >= len(records):
            raise MissingFixtureError(f"no fixture for node {key} (consultation {k + 1})")
        self.consulted[key] = k + 1
        return records[k]


@dataclass
class ScriptedExpert:
    kind: ExpertKind
    scenario: ScriptedScenario

    def execute(self, call: ExpertCall) -> NodeFeedback:
        _check_kind(self, call)
        return normalize_feedback(self.scenario.next_for(call.vertex.id), self.kind)


def _whitespace_tokens(text: str) -> int:
    return len(text.split())


def _synthetic_output(kind: ExpertKind, call: ExpertCall) -> ExpertOutput:
    text = f"{call.vertex.instruction} [{call.vertex.id}]"
    if kind is ExpertKind.RAG:
        return RagOutput((text,), (Evidence(f"src:{call.vertex.id}", text),), ((0, 0),))
    if kind is ExpertKind.LOGIC:
        return LogicOutput((text,), (True,))
    return ExprOutput(draft=text)


@dataclass
class FaultInjectingExpert:
    """Expert that fails with a fixed probability.

    Successful calls delegate to ``inner`` when given, else synthesize a
    schema-valid output whose confidence is drawn from ``confidence_range``.
    Failures report ``exception=True`` and confidence 0.0.
    """

    kind: ExpertKind
    failure_rate: float = 0.0
    seed: int = 0
    inner: Expert | None = None
    confidence_range: tuple[float, float] = (0.9, 0.9)
    tokens_per_call: int = 16
    wall_time: float = 0.1
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError("failure_rate must lie in [0, 1]")
        self._rng = random.Random(f"{self.seed}:{self.kind.value}")

    def execute(self, call: ExpertCall) -> NodeFeedback:
        _check_kind(self, call)
        prompt = _whitespace_tokens(call.vertex.instruction) + self.tokens_per_call
        if self._rng.random() < self.failure_rate:
            return NodeFeedback(
                output=empty_output(self.kind),
                exception=True,
                confidence=0.0,
                tokens_prompt=prompt,
                tokens_completion=0,
                wall_time=self.wall_time,
            )
        if self.inner is not None:
            return self.inner.execute(call)
        lo, hi = self.confidence_range
        confidence = round(lo + (hi - lo) * self._rng.random(), 6)
        return normalize_feedback(
            NodeFeedback(
                output=_synthetic_output(self.kind, call),
                confidence=confidence,
                tokens_prompt=prompt,
                tokens_completion=self.tokens_per_call,
                wall_time=self.wall_time,
            ),
            self.kind,
        )


@dataclass
class RemoteExpert:
    """One JSON request/response exchange per node against an HTTP endpoint."""

    kind: ExpertKind
    url: str
    timeout: float = 30.0
    retries: int = 2

    def request_body(self, call: ExpertCall) -> dict[str, Any]:
        return {
            "expert_kind": self.kind.value,
            "node": str(call.vertex.id),
            "instruction": call.vertex.instruction,
            "parent_payloads": [
                {"node": str(p.node), "output": output_to_dict(p.output)}
                for p in call.parent_payloads
            ],
            "repair_context": call.repair_context,
        }

    def execute(self, call: ExpertCall) -> NodeFeedback:
        _check_kind(self, call)
        body = json.dumps(self.request_body(call), sort_keys=True).encode()
        request = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        started = time.perf_counter()
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                    raw = resp.read().decode("utf-8")
                break
            except (urllib.error.URLError, OSError) as exc:
                last_error = exc
        else:
            raise ExpertUnavailableError(f"{self.url}: {last_error}")
        elapsed = time.perf_counter() - started
        return self._parse_response(raw, body.decode(), elapsed)

    def _parse_response(self, raw: str, request_text: str, elapsed: float) -> NodeFeedback:
        malformed = False
        try:
            doc = json.loads(raw)
            if not isinstance(doc, dict):
                raise ValueError("response is not an object")
        except ValueError:
            doc, malformed = {}, True
        try:
            out_doc = dict(doc["output"])
            out_doc.setdefault("kind", self.kind.value)
            output = output_from_dict(out_doc)
        except (KeyError, TypeError, ValueError):
            output, malformed = empty_output(self.kind), True
        confidence, ok = parse_confidence(doc)
        exception = doc.get("exception", False)
        if not isinstance(exception, bool):
            exception, malformed = True, True
        prompt = doc.get("tokens_prompt")
        completion = doc.get("tokens_completion")
        if not isinstance(prompt, int) or isinstance(prompt, bool) or prompt < 0:
            prompt = _whitespace_tokens(request_text)
        if not isinstance(completion, int) or isinstance(completion, bool) or completion < 0:
            completion = _whitespace_tokens(json.dumps(doc.get("output", "")))
        return normalize_feedback(
            NodeFeedback(
                output=output,
                exception=exception or malformed or not ok,
                confidence=confidence,
                tokens_prompt=prompt,
                tokens_completion=completion,
                wall_time=elapsed,
            ),
            self.kind,
        )
