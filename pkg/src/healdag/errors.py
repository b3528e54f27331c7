"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class HealdagError(Exception):
    """Base class for all engine errors."""

    code = "HEALDAG_ERROR"


class UnknownNodeError(HealdagError, KeyError):
    code = "UNKNOWN_NODE"

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class InvalidDeltaError(HealdagError, ValueError):
    code = "INVALID_DELTA"


class ExpertUnavailableError(HealdagError):
    code = "EXPERT_UNAVAILABLE"


class ScenarioParseError(HealdagError, ValueError):
    code = "SCENARIO_PARSE_ERROR"


class MissingFixtureError(HealdagError, LookupError):
    code = "MISSING_FIXTURE"


class UnknownModuleError(HealdagError, KeyError):
    code = "UNKNOWN_MODULE"

    def __str__(self) -> str:
        return Exception.__str__(self)


class EmptySetError(HealdagError, ValueError):
    code = "EMPTY_SET"


class PlannerRefusalError(HealdagError):
    code = "PLANNER_REFUSAL"


class ConfigError(HealdagError, ValueError):
    code = "CONFIG_ERROR"


class ReplayMismatchError(HealdagError):
    """A replayed run diverged from its recording."""

    code = "REPLAY_MISMATCH"

    def __init__(self, index: int, expected: object, actual: object) -> None:
        self.index = index
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"replay diverged at event {index}: expected {expected!r}, got {actual!r}"
        )


class DegenerateSetError(HealdagError, ValueError):
    code = "DEGENERATE_SET"


class EmptyBatchError(HealdagError, ValueError):
    code = "EMPTY_BATCH"


class DivergenceError(HealdagError, FloatingPointError):
    def __init__(self, step: int, loss: float) -> None:
        self.step = step
        self.loss = loss
        super().__init__(f"loss became non-finite ({loss}) at step {step}")

    code = "DIVERGENCE"
