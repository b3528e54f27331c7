"""Engine configuration document.

A single JSON file with the sections ``thresholds``, ``budget``,
``adapters``, ``backbone``, ``experts`` and ``scenario``. Unknown keys are
rejected so typos surface as CONFIG_ERROR instead of silent defaults.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from healdag.adapters import DEFAULT_HOT_LOAD_SECONDS, AdapterSpec, Module
from healdag.errors import ConfigError
from healdag.evaluator import EvalThresholds
from healdag.graph import ExpertKind
from healdag.metrics import BackboneSpec

# Per-layer projections of a 4096-wide, 32-layer decoder (GQA key/value,
# 14336-wide MLP). Adapting all seven keeps a rank-8 adapter near 0.08 GB in fp32.
LAYER_DIMS: tuple[tuple[int, int], ...] = (
    (4096, 4096),
    (4096, 1024),
    (4096, 1024),
    (4096, 4096),
    (4096, 14336),
    (4096, 14336),
    (14336, 4096),
)
NUM_LAYERS = 32
BACKBONE_BYTES = 16_500_000_000


@dataclass(frozen=True)
class AdapterEntry:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    dims: tuple[tuple[int, int], ...] = LAYER_DIMS
    layers: int = NUM_LAYERS
    bytes_per_param: int = 4
    hot_load_seconds: float | None = None

    def spec(self, module: str) -> AdapterSpec:
        return AdapterSpec(
            module,
            rank=self.rank,
            scaling=self.alpha,
            dims=tuple(self.dims) * self.layers,
            bytes_per_param=self.bytes_per_param,
            dropout=self.dropout,
            hot_load_seconds=self.hot_load_seconds,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "dropout": self.dropout,
            "dims": [list(d) for d in self.dims],
            "layers": self.layers,
            "bytes_per_param": self.bytes_per_param,
            "hot_load_seconds": self.hot_load_seconds,
        }


@dataclass(frozen=True)
class BudgetConfig:
    omega_max: int = 3
    replacement_size_cap: int = 2


@dataclass(frozen=True)
class ExpertsConfig:
    """How experts are realized for a run.

    ``mode`` is ``scripted`` (fixture table), ``fault`` (seeded fault
    injection) or ``remote`` (HTTP endpoints keyed by expert kind).
    """

    mode: str = "scripted"
    seed: int = 0
    failure_rate: float = 0.0
    confidence_range: tuple[float, float] = (0.9, 0.9)
    tokens_per_call: int = 16
    wall_time: float = 0.1
    endpoints: Mapping[str, str] = field(default_factory=dict)
    timeout: float = 30.0
    retries: int = 2


@dataclass(frozen=True)
class ScenarioConfig:
    """Scripted planner behaviour: per-call cost and patch-kind overrides."""

    planner_tokens_prompt: int = 0
    planner_tokens_completion: int = 0
    planner_wall_time: float = 0.0
    patch_kinds: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class EngineConfig:
    thresholds: EvalThresholds = field(default_factory=EvalThresholds)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    adapters: Mapping[str, AdapterEntry] = field(
        default_factory=lambda: {m.value: AdapterEntry() for m in Module}
    )
    backbone_bytes: int = BACKBONE_BYTES
    hot_load_seconds: float = DEFAULT_HOT_LOAD_SECONDS
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    experts: ExpertsConfig = field(default_factory=ExpertsConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    def adapter_specs(self) -> dict[str, AdapterSpec]:
        return {name: entry.spec(name) for name, entry in self.adapters.items()}

    def to_dict(self) -> dict[str, Any]:
        e = self.experts
        return {
            "thresholds": {"tau_c": self.thresholds.tau_c, "tau_u": self.thresholds.tau_u},
            "budget": {
                "omega_max": self.budget.omega_max,
                "replacement_size_cap": self.budget.replacement_size_cap,
            },
            "adapters": {
                "backbone_bytes": self.backbone_bytes,
                "hot_load_seconds": self.hot_load_seconds,
                "modules": {name: a.to_dict() for name, a in sorted(self.adapters.items())},
            },
            "backbone": {
                "name": self.backbone.name,
                "parameter_count": self.backbone.parameter_count,
            },
            "experts": {
                "mode": e.mode,
                "seed": e.seed,
                "failure_rate": e.failure_rate,
                "confidence_range": list(e.confidence_range),
                "tokens_per_call": e.tokens_per_call,
                "wall_time": e.wall_time,
                "endpoints": dict(sorted(e.endpoints.items())),
                "timeout": e.timeout,
                "retries": e.retries,
            },
            "scenario": {
                "planner_tokens_prompt": self.scenario.planner_tokens_prompt,
                "planner_tokens_completion": self.scenario.planner_tokens_completion,
                "planner_wall_time": self.scenario.planner_wall_time,
                "patch_kinds": dict(sorted(self.scenario.patch_kinds.items())),
            },
        }


SECTIONS = ("thresholds", "budget", "adapters", "backbone", "experts", "scenario")


def _section(doc: Mapping[str, Any], name: str, allowed: set[str]) -> dict[str, Any]:
    sec = doc.get(name, {})
    if not isinstance(sec, Mapping):
        raise ConfigError(f"[{name}] must be a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"[{name}] unknown key(s): {', '.join(sorted(unknown))}")
    return dict(sec)


def config_from_dict(doc: Mapping[str, Any]) -> EngineConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a mapping")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    base = EngineConfig()
    try:
        th = _section(doc, "thresholds", {"tau_c", "tau_u"})
        thresholds = EvalThresholds(
            float(th.get("tau_c", base.thresholds.tau_c)),
            float(th.get("tau_u", base.thresholds.tau_u)),
        )
        bu = _section(doc, "budget", {"omega_max", "replacement_size_cap"})
        budget = BudgetConfig(
            int(bu.get("omega_max", base.budget.omega_max)),
            int(bu.get("replacement_size_cap", base.budget.replacement_size_cap)),
        )
        if budget.omega_max <= 0 or budget.replacement_size_cap < 0:
            raise ConfigError("[budget] omega_max must be > 0 and replacement_size_cap >= 0")

        ad = _section(doc, "adapters", {"backbone_bytes", "hot_load_seconds", "modules"})
        modules_doc = ad.get("modules")
        adapters: dict[str, AdapterEntry] = dict(base.adapters)
        if modules_doc is not None:
            adapters = {}
            allowed = set(AdapterEntry().to_dict())
            for name, entry in modules_doc.items():
                bad = set(entry) - allowed
                if bad:
                    raise ConfigError(f"[adapters.{name}] unknown key(s): {', '.join(sorted(bad))}")
                defaults = AdapterEntry()
                dims = entry.get("dims")
                adapters[name] = AdapterEntry(
                    rank=int(entry.get("rank", defaults.rank)),
                    alpha=float(entry.get("alpha", defaults.alpha)),
                    dropout=float(entry.get("dropout", defaults.dropout)),
                    dims=defaults.dims if dims is None else tuple((int(d), int(k)) for d, k in dims),
                    layers=int(entry.get("layers", defaults.layers)),
                    bytes_per_param=int(entry.get("bytes_per_param", defaults.bytes_per_param)),
                    hot_load_seconds=entry.get("hot_load_seconds"),
                )
        for m in Module:
            if m.value not in adapters:
                raise ConfigError(f"[adapters] module {m.value} is not registered")
        backbone_bytes = int(ad.get("backbone_bytes", base.backbone_bytes))
        hot_load = float(ad.get("hot_load_seconds", base.hot_load_seconds))
        if hot_load <= 0 or backbone_bytes < 0:
            raise ConfigError("[adapters] hot_load_seconds must be > 0, backbone_bytes >= 0")

        bb = _section(doc, "backbone", {"name", "parameter_count"})
        backbone = BackboneSpec(
            int(bb.get("parameter_count", base.backbone.parameter_count)),
            str(bb.get("name", base.backbone.name)),
        )

        ex = _section(
            doc,
            "experts",
            {"mode", "seed", "failure_rate", "confidence_range", "tokens_per_call",
             "wall_time", "endpoints", "timeout", "retries"},
        )
        be = base.experts
        lo, hi = ex.get("confidence_range", be.confidence_range)
        experts = ExpertsConfig(
            mode=str(ex.get("mode", be.mode)),
            seed=int(ex.get("seed", be.seed)),
            failure_rate=float(ex.get("failure_rate", be.failure_rate)),
            confidence_range=(float(lo), float(hi)),
            tokens_per_call=int(ex.get("tokens_per_call", be.tokens_per_call)),
            wall_time=float(ex.get("wall_time", be.wall_time)),
            endpoints={k: str(v) for k, v in ex.get("endpoints", {}).items()},
            timeout=float(ex.get("timeout", be.timeout)),
            retries=int(ex.get("retries", be.retries)),
        )
        if experts.mode not in ("scripted", "fault", "remote"):
            raise ConfigError(f"[experts] unknown mode {experts.mode!r}")
        if not (0.0 <= experts.failure_rate <= 1.0 and 0.0 <= lo <= hi <= 1.0):
            raise ConfigError("[experts] failure_rate and confidence_range must lie in [0, 1]")
        if experts.mode == "remote":
            missing = [k.value for k in ExpertKind if k.value not in experts.endpoints]
            if missing:
                raise ConfigError(f"[experts] remote mode needs endpoints for {missing}")

        sc = _section(
            doc,
            "scenario",
            {"planner_tokens_prompt", "planner_tokens_completion", "planner_wall_time", "patch_kinds"},
        )
        bs = base.scenario
        patch_kinds = {k: str(v) for k, v in sc.get("patch_kinds", {}).items()}
        for k, v in patch_kinds.items():
            ExpertKind(v)
        scenario = ScenarioConfig(
            int(sc.get("planner_tokens_prompt", bs.planner_tokens_prompt)),
            int(sc.get("planner_tokens_completion", bs.planner_tokens_completion)),
            float(sc.get("planner_wall_time", bs.planner_wall_time)),
            patch_kinds,
        )
        cfg = EngineConfig(
            thresholds, budget, adapters, backbone_bytes, hot_load, backbone, experts, scenario
        )
        cfg.adapter_specs()
    except ConfigError:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path | None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)
