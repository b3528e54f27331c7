"""Accounting rules (#Tok, TFLOPs, latency, peak memory, eta) and run reports."""

from __future__ import annotations

import csv
import io
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from healdag.engine import RunResult


@dataclass(frozen=True)
class BackboneSpec:
    parameter_count: int = 8_000_000_000
    name: str = "8B-backbone"

    def __post_init__(self) -> None:
        if self.parameter_count <= 0:
            raise ValueError("parameter_count must be positive")


def tflops(tokens_total: int, backbone: BackboneSpec) -> float:
    """Forward-pass compute estimate, 2 * parameters * tokens, in teraFLOPs."""
    return 2 * backbone.parameter_count * tokens_total / 1e12


@dataclass(frozen=True)
class RunMetrics:
    tokens_total: int = 0
    tflops: float = 0.0
    latency_seconds: float = 0.0
    peak_memory_bytes: int = 0
    suspensions: int = 0
    expert_calls: int = 0
    planner_calls: int = 0
    planner_tokens: int = 0
    expert_seconds: float = 0.0
    planner_seconds: float = 0.0
    switch_seconds: float = 0.0
    latency_mode: str = "simulated"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunMetrics:
        return cls(**data)


COLUMNS = ("run", "status", "acc_proxy", "tokens", "tflops", "latency_s", "peak_mem_gb", "eta", "latency_mode")
_ADDITIVE = ("tokens", "tflops", "latency_s", "eta")


def _row(name: str, result: RunResult, grader: Callable[[RunResult], float] | None) -> dict[str, Any]:
    m = result.metrics
    return {
        "run": name,
        "status": result.status.value,
        "acc_proxy": "" if grader is None else round(grader(result), 4),
        "tokens": m.tokens_total,
        "tflops": round(m.tflops, 4),
        "latency_s": round(m.latency_seconds, 4),
        "peak_mem_gb": round(m.peak_memory_bytes / 1e9, 4),
        "eta": m.suspensions,
        "latency_mode": m.latency_mode,
    }


def aggregate(
    runs: Sequence[tuple[str, RunResult]] | Mapping[str, RunResult],
    grader: Callable[[RunResult], float] | None = None,
) -> list[dict[str, Any]]:
    """One row per run in name order, then a totals row when there are runs."""
    items = sorted(runs.items() if isinstance(runs, Mapping) else runs, key=lambda kv: kv[0])
    rows = [_row(name, result, grader) for name, result in items]
    if rows:
        total: dict[str, Any] = {c: "" for c in COLUMNS}
        total["run"] = "TOTAL"
        for col in _ADDITIVE:
            value = sum(r[col] for r in rows)
            total[col] = round(value, 4) if isinstance(value, float) else value
        rows.append(total)
    return rows


def render_csv(rows: Sequence[Mapping[str, Any]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row.get(c, "") for c in COLUMNS})
    return buf.getvalue()


def render_table(rows: Sequence[Mapping[str, Any]]) -> str:
    cells = [list(COLUMNS)] + [[str(row.get(c, "")) for c in COLUMNS] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(COLUMNS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
