"""Self-repairing orchestration of expert calls over a versioned task graph."""

from __future__ import annotations

from healdag.engine import RunResult, RunStatus, replay, run, run_files, strict_isolation_check
from healdag.graph import ExpertKind, NodeId, TaskGraph, Vertex

__all__ = [
    "ExpertKind",
    "NodeId",
    "RunResult",
    "RunStatus",
    "TaskGraph",
    "Vertex",
    "replay",
    "run",
    "run_files",
    "strict_isolation_check",
]

__version__ = "0.1.0"
