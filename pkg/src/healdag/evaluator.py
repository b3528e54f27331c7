"""Global uncertainty and the suspension indicator."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any

from healdag.errors import EmptySetError
from healdag.experts import NodeFeedback
from healdag.graph import NodeId


class CauseKind(str, Enum):
    EXCEPTION_FLAG = "EXCEPTION_FLAG"
    CONFIDENCE_FLOOR = "CONFIDENCE_FLOOR"
    GLOBAL_UNCERTAINTY = "GLOBAL_UNCERTAINTY"
    NONE = "NONE"


@dataclass(frozen=True)
class EvalThresholds:
    tau_c: float = 0.35
    tau_u: float = 0.45

    def __post_init__(self) -> None:
        if not (0.0 < self.tau_c < 1.0 and 0.0 < self.tau_u < 1.0):
            raise ValueError("thresholds must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class SuspensionCause:
    kind: CauseKind
    offending_node: NodeId | None = None
    observed_value: float = 0.0

    def __post_init__(self) -> None:
        if (self.kind is CauseKind.NONE) != (self.offending_node is None):
            raise ValueError("offending_node must be present exactly when kind != NONE")

    @property
    def suspend(self) -> bool:
        return self.kind is not CauseKind.NONE

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "node": None if self.offending_node is None else str(self.offending_node),
            "value": self.observed_value,
        }


NO_SUSPENSION = SuspensionCause(CauseKind.NONE)

# Uncertainty within this distance of tau_u counts as equal, so decimal
# inputs such as mean confidence 0.55 against tau_u 0.45 trigger as written.
UNCERTAINTY_SLACK = 1e-12


def global_uncertainty(confidences: Sequence[float]) -> float:
    """One minus the mean confidence over committed nodes."""
    if not confidences:
        raise EmptySetError("global uncertainty is undefined before the first commit")
    return 1.0 - math.fsum(confidences) / len(confidences)


def check_suspension(
    committed: Sequence[tuple[NodeId, NodeFeedback]],
    thresholds: EvalThresholds,
    ranks: Mapping[NodeId, int] | None = None,
) -> SuspensionCause:
    """First matching cause in priority exception > confidence floor > uncertainty.

    Ties among violators go to the lowest topological rank (then id). When
    ``ranks`` is omitted, position in ``committed`` stands in for rank.
    """
    if not committed:
        return NO_SUSPENSION
    position = {node: i for i, (node, _) in enumerate(committed)}

    def order(node: NodeId) -> tuple[int, str]:
        rank = ranks[node] if ranks is not None and node in ranks else position[node]
        return rank, str(node)

    raised = [n for n, fb in committed if fb.exception]
    if raised:
        node = min(raised, key=order)
        return SuspensionCause(CauseKind.EXCEPTION_FLAG, node, 1.0)

    by_node = dict(committed)
    low = [n for n, fb in committed if fb.confidence < thresholds.tau_c]
    if low:
        node = min(low, key=order)
        return SuspensionCause(CauseKind.CONFIDENCE_FLOOR, node, by_node[node].confidence)

    u = global_uncertainty([fb.confidence for _, fb in committed])
    if u >= thresholds.tau_u - UNCERTAINTY_SLACK:
        # no single violator: blame the least confident node
        node = min(by_node, key=lambda n: (by_node[n].confidence, *order(n)))
        return SuspensionCause(CauseKind.GLOBAL_UNCERTAINTY, node, u)
    return NO_SUSPENSION
