"""Time-division adapter scheduling as a memory/latency accounting model.

Nothing here touches real weights: bytes and seconds are simulated from
configuration so the one-resident-adapter memory bound can be checked
exactly.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from healdag.errors import UnknownModuleError

DEFAULT_HOT_LOAD_SECONDS = 0.8


class Module(str, Enum):
    PLAN = "PLAN"
    RAG = "RAG"
    LOGIC = "LOGIC"
    EXPR = "EXPR"


def _module_name(module: str) -> str:
    return module.value if isinstance(module, Module) else str(module)


@dataclass(frozen=True)
class AdapterSpec:
    """Low-rank adapter for one module.

    ``scaling`` (alpha) and ``dropout`` are carried for fidelity only;
    memory depends on rank, layer dims and bytes per parameter.
    """

    module: str
    rank: int = 8
    scaling: float = 16.0
    dims: tuple[tuple[int, int], ...] = ((4096, 4096),)
    bytes_per_param: int = 2
    dropout: float = 0.05
    hot_load_seconds: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "module", _module_name(self.module))
        object.__setattr__(self, "dims", tuple((int(d), int(k)) for d, k in self.dims))
        if self.rank <= 0:
            raise ValueError("adapter rank must be positive")
        if self.scaling <= 0:
            raise ValueError("adapter scaling must be positive")
        if self.bytes_per_param <= 0:
            raise ValueError("bytes_per_param must be positive")
        if not self.dims:
            raise ValueError("an adapter needs at least one adapted layer")
        for d, k in self.dims:
            if self.rank * 8 > min(d, k):
                raise ValueError(f"rank {self.rank} is not low-rank for a {d}x{k} layer")
        if self.hot_load_seconds is not None and self.hot_load_seconds <= 0:
            raise ValueError("hot_load_seconds must be positive")


def adapter_bytes(spec: AdapterSpec) -> int:
    """Size of A (d x r) plus B (r x k), summed over adapted layers."""
    return sum(spec.rank * (d + k) for d, k in spec.dims) * spec.bytes_per_param


@dataclass(frozen=True)
class MemoryModel:
    backbone_bytes: int
    adapter_bytes: Mapping[str, int]
    loaded: str | None = None

    def __post_init__(self) -> None:
        if self.backbone_bytes < 0 or any(b < 0 for b in self.adapter_bytes.values()):
            raise ValueError("byte counts must be non-negative")
        if self.loaded is not None and self.loaded not in self.adapter_bytes:
            raise UnknownModuleError(f"unknown module {self.loaded}")

    @property
    def footprint(self) -> int:
        extra = self.adapter_bytes[self.loaded] if self.loaded is not None else 0
        return self.backbone_bytes + extra


@dataclass(frozen=True)
class SwitchEvent:
    timestamp: float
    source: str | None
    target: str
    cost: float

    def to_dict(self) -> dict[str, Any]:
        return {"timestamp": self.timestamp, "from": self.source, "to": self.target, "cost": self.cost}


@dataclass(frozen=True)
class SwitchLog:
    events: tuple[SwitchEvent, ...] = ()

    def append(self, event: SwitchEvent) -> SwitchLog:
        if event.cost < 0:
            raise ValueError("switch cost must be non-negative")
        if self.events and event.timestamp <= self.events[-1].timestamp:
            raise ValueError("switch timestamps must be strictly increasing")
        return SwitchLog(self.events + (event,))

    @property
    def total_cost(self) -> float:
        return sum(e.cost for e in self.events)


def switch_to(
    module: str,
    model: MemoryModel,
    log: SwitchLog,
    now: float,
    hot_load_seconds: float | Mapping[str, float] = DEFAULT_HOT_LOAD_SECONDS,
) -> tuple[MemoryModel, SwitchLog, float]:
    """Unload whatever is resident and load ``module``; no-op if already loaded."""
    name = _module_name(module)
    if name not in model.adapter_bytes:
        raise UnknownModuleError(f"unknown module {name}")
    if model.loaded == name:
        return model, log, 0.0
    if isinstance(hot_load_seconds, Mapping):
        cost = float(hot_load_seconds[name])
    else:
        cost = float(hot_load_seconds)
    new_model = MemoryModel(model.backbone_bytes, model.adapter_bytes, name)
    return new_model, log.append(SwitchEvent(now, model.loaded, name, cost)), cost


def peak_memory(model: MemoryModel, history: Iterable[SwitchEvent] = ()) -> int:
    """Backbone plus the largest registered adapter.

    The bound does not depend on the switch history; ``history`` is accepted
    so callers can pass the trace they are bounding.
    """
    return model.backbone_bytes + max(model.adapter_bytes.values(), default=0)


def observed_footprints(model: MemoryModel, log: SwitchLog) -> list[tuple[float, str | None, int]]:
    """Replay a switch log into ``(timestamp, loaded, footprint)`` rows."""
    rows = []
    for event in log.events:
        rows.append(
            (event.timestamp, event.target, model.backbone_bytes + model.adapter_bytes[event.target])
        )
    return rows


@dataclass
class AdapterScheduler:
    """Single-writer owner of the memory model and switch log for one run."""

    specs: Mapping[str, AdapterSpec]
    backbone_bytes: int
    hot_load_seconds: float = DEFAULT_HOT_LOAD_SECONDS
    model: MemoryModel = field(init=False)
    log: SwitchLog = field(init=False, default_factory=SwitchLog)

    def __post_init__(self) -> None:
        if self.hot_load_seconds <= 0:
            raise ValueError("hot_load_seconds must be positive")
        sizes = {_module_name(name): adapter_bytes(spec) for name, spec in self.specs.items()}
        self.model = MemoryModel(self.backbone_bytes, sizes)

    @classmethod
    def uniform(
        cls,
        modules: Sequence[str],
        backbone_bytes: int,
        spec: AdapterSpec,
        hot_load_seconds: float = DEFAULT_HOT_LOAD_SECONDS,
    ) -> AdapterScheduler:
        specs = {
            _module_name(m): AdapterSpec(
                _module_name(m), spec.rank, spec.scaling, spec.dims, spec.bytes_per_param
            )
            for m in modules
        }
        return cls(specs, backbone_bytes, hot_load_seconds)

    def cost_of(self, module: str) -> float:
        spec = self.specs.get(module)
        if spec is not None and spec.hot_load_seconds is not None:
            return spec.hot_load_seconds
        return self.hot_load_seconds

    def switch(self, module: str, now: float) -> float:
        name = _module_name(module)
        cost = self.cost_of(name) if name in self.model.adapter_bytes else self.hot_load_seconds
        self.model, self.log, charged = switch_to(name, self.model, self.log, now, cost)
        return charged

    @property
    def peak(self) -> int:
        return peak_memory(self.model, self.log.events)

    def trace(self) -> list[tuple[float, str | None, int]]:
        return observed_footprints(self.model, self.log)
