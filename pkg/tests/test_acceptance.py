"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line before asserting, so
``pytest tests/test_acceptance.py -s`` (or running this file directly)
gives a one-screen summary.
"""

from __future__ import annotations

import math
import random
import statistics
import sys
import time
from fractions import Fraction

import numpy as np

from conftest import E, L, R, chain, diamond, fig3, n, vx
from healdag.adapters import AdapterScheduler, AdapterSpec, adapter_bytes
from healdag.config import BACKBONE_BYTES, LAYER_DIMS, NUM_LAYERS, BudgetConfig, EngineConfig, ExpertsConfig
from healdag.critic import CriticConfig, Trajectory, reward
from healdag.dpo import (
    DpoConfig,
    PolicyParams,
    dpo_gradient,
    dpo_loss,
    finite_difference_gradient,
    synthetic_dataset,
    train,
)
from healdag.engine import RunStatus, build_experts, replay, run, run_files, run_recorded, strict_isolation_check
from healdag.evaluator import CauseKind, EvalThresholds, check_suspension
from healdag.experts import LogicOutput, NodeFeedback
from healdag.graph import NodeId, TaskGraph
from healdag.metrics import BackboneSpec, tflops
from healdag.reconstructor import ScriptedPlanner


def report(number: int, title: str, passed: bool, detail: str) -> None:
    print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} ({detail})")


class Fixed:
    def __init__(self, phi: float) -> None:
        self.phi = phi

    def grade(self, trajectory: Trajectory) -> float:
        return self.phi


# -- 1 -----------------------------------------------------------------------


def criterion_1() -> tuple[bool, str]:
    start = time.perf_counter()
    spec = AdapterSpec("pool", rank=8, dims=LAYER_DIMS * NUM_LAYERS, bytes_per_param=4)
    size = adapter_bytes(spec)
    expected = BACKBONE_BYTES + size
    peaks = {}
    for pool in (1, 4, 16, 64):
        sched = AdapterScheduler.uniform([f"m{i}" for i in range(pool)], BACKBONE_BYTES, spec)
        t = 0.0
        for step in range(256):
            t += 1.0
            sched.switch(f"m{step % pool}", t)
        observed = max(f for _, _, f in sched.trace())
        assert observed == sched.peak
        peaks[pool] = sched.peak
    elapsed = time.perf_counter() - start
    passed = set(peaks.values()) == {expected} and elapsed < 1.0
    return passed, f"peak {expected} bytes for pools {sorted(peaks)}, {elapsed:.2f}s"


def test_criterion_1_constant_memory():
    passed, detail = criterion_1()
    report(1, "memory bound independent of pool size", passed, detail)
    assert passed, detail


# -- 2 -----------------------------------------------------------------------


def exact(x: float) -> Fraction:
    # the decimal a reader would write for x
    return Fraction(repr(x))


def oracle(confidences, flags, tau_c, tau_u) -> tuple[CauseKind, int | None]:
    for i, xi in enumerate(flags):
        if xi:
            return CauseKind.EXCEPTION_FLAG, i
    for i, c in enumerate(confidences):
        if exact(c) < exact(tau_c):
            return CauseKind.CONFIDENCE_FLOOR, i
    u = 1 - sum(exact(c) for c in confidences) / len(confidences)
    if u >= exact(tau_u):
        low = min(confidences)
        return CauseKind.GLOBAL_UNCERTAINTY, confidences.index(low)
    return CauseKind.NONE, None


def random_case(rng: random.Random):
    tau_c = rng.choice([0.2, 0.3, 0.35, 0.4])
    tau_u = rng.choice([0.4, 0.45, 0.5, 0.55])
    k = rng.randint(1, 8)
    shape = rng.random()
    if shape < 0.15:
        # mean exactly 1 - tau_u: uncertainty sits on its threshold
        confidences = [round(1 - tau_u, 10)] * k
    elif shape < 0.3:
        confidences = [rng.uniform(tau_c, 1.0) for _ in range(k)]
        confidences[rng.randrange(k)] = tau_c
    else:
        confidences = [rng.random() for _ in range(k)]
    p = rng.choice([0.0, 0.05, 0.3])
    flags = [rng.random() < p for _ in range(k)]
    return confidences, flags, tau_c, tau_u


def criterion_2(cases: int = 10_000) -> tuple[bool, str]:
    rng = random.Random(2024)
    start = time.perf_counter()
    mismatches = 0
    floor_boundary = uncertainty_boundary = 0
    for _ in range(cases):
        confidences, flags, tau_c, tau_u = random_case(rng)
        committed = [
            (NodeId(f"v{i + 1}"), NodeFeedback(LogicOutput(("s",), (True,)), xi, c))
            for i, (c, xi) in enumerate(zip(confidences, flags))
        ]
        got = check_suspension(committed, EvalThresholds(tau_c, tau_u))
        kind, index = oracle(confidences, flags, tau_c, tau_u)
        want_node = None if index is None else committed[index][0]
        if (got.kind, got.offending_node) != (kind, want_node):
            mismatches += 1
        if not any(flags):
            if tau_c in confidences and min(confidences) == tau_c:
                floor_boundary += 1
                mismatches += got.kind is CauseKind.CONFIDENCE_FLOOR
            if len(set(confidences)) == 1 and 1 - exact(confidences[0]) == exact(tau_u):
                uncertainty_boundary += 1
                mismatches += got.kind is not CauseKind.GLOBAL_UNCERTAINTY
    elapsed = time.perf_counter() - start
    passed = mismatches == 0 and floor_boundary > 0 and uncertainty_boundary > 0 and elapsed < 5.0
    detail = (
        f"{cases} cases, {mismatches} mismatches, {floor_boundary} c=tau_c and "
        f"{uncertainty_boundary} U=tau_u boundary cases, {elapsed:.2f}s"
    )
    return passed, detail


def test_criterion_2_suspension_oracle():
    passed, detail = criterion_2()
    report(2, "suspension logic matches direct evaluation", passed, detail)
    assert passed, detail


# -- 3 -----------------------------------------------------------------------


def criterion_3() -> tuple[bool, str]:
    notes = []
    passed = True
    for omega in (1, 3, 5):
        start = time.perf_counter()
        graph = chain(4)
        config = EngineConfig(
            budget=BudgetConfig(omega), experts=ExpertsConfig(mode="fault", failure_rate=1.0, seed=omega)
        )
        r = run(graph.query, ScriptedPlanner(graph), build_experts(config), config)
        elapsed = time.perf_counter() - start
        added = max(len(x["added"]) for x in r.repair_log)
        bound = len(graph.vertices) + omega * added + 1
        ok = (
            r.status in (RunStatus.DEGRADED, RunStatus.FAILED)
            and r.metrics.suspensions == omega
            and r.metrics.expert_calls <= bound
            and elapsed < 5.0
        )
        passed &= ok
        notes.append(f"omega={omega}: {r.status.value}, {r.metrics.expert_calls}/{bound} calls")
    return passed, "; ".join(notes)


def test_criterion_3_budget_termination():
    passed, detail = criterion_3()
    report(3, "repair budget terminates adversarial runs", passed, detail)
    assert passed, detail


# -- 4 -----------------------------------------------------------------------


def criterion_4(paths) -> tuple[bool, str]:
    start = time.perf_counter()
    first = run_files(paths["graph"], paths["scenario"], paths["config"])
    second = run_files(paths["graph"], paths["scenario"], paths["config"])
    elapsed = time.perf_counter() - start
    patches = [x for x in first.repair_log if x["action"] == "PATCH"]
    rebuilds = [x for x in first.repair_log if x["action"] == "RECONSTRUCT"]
    passed = (
        first.status is RunStatus.COMPLETED
        and [x["node"] for x in patches] == ["v2"]
        and not rebuilds
        and n("v2_patch") in first.final_graph.vertices
        and first.dumps() == second.dumps()
        and replay(first).dumps() == first.dumps()
        and elapsed < 1.0
    )
    return passed, f"{len(patches)} patch at v2, {len(rebuilds)} reconstructions, identical bytes, {elapsed:.2f}s"


def test_criterion_4_worked_example(abs_paths):
    passed, detail = criterion_4(abs_paths)
    report(4, "absolute-value equation replay", passed, detail)
    assert passed, detail


# -- 5 -----------------------------------------------------------------------


def criterion_5() -> tuple[bool, str]:
    start = time.perf_counter()
    graph = chain(4)
    nodes, eta = 4, 1
    flags = (True, False, True, True)
    expected = -0.1 * math.log(1 + nodes + 2 * eta)
    scores = [
        reward(Trajectory("q", (graph,), nodes, eta, "a", flags), CriticConfig(0.1, 2.0, Fixed(k / 10)))
        for k in range(11)
    ]
    veto_ok = statistics.pvariance(scores) == 0.0 and all(abs(s - expected) <= 1e-12 for s in scores)
    cfg = CriticConfig(0.1, 2.0, Fixed(1.0))
    values = [reward(Trajectory("q", (graph,), v, eta, "a", (True,) * v), cfg) for v in range(1, 1001)]
    steps = [a - b for a, b in zip(values, values[1:])]
    sublinear = all(s > 0 for s in steps) and all(b < a for a, b in zip(steps, steps[1:]))
    elapsed = time.perf_counter() - start
    passed = veto_ok and sublinear and elapsed < 1.0
    return passed, f"reward {scores[0]:.6f} on all 11 grid points, concave up to 1000 nodes, {elapsed:.2f}s"


def test_criterion_5_critic():
    passed, detail = criterion_5()
    report(5, "critic veto and sub-linear penalty", passed, detail)
    assert passed, detail


# -- 6 -----------------------------------------------------------------------


def criterion_6() -> tuple[bool, str]:
    start = time.perf_counter()
    worst_ln2 = 0.0
    worst_rel = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        ds = synthetic_dataset(6, 4, seed=seed, noise_features=2)
        ref = rng.normal(size=ds.dim)
        beta = float(rng.uniform(0.05, 2.0))
        worst_ln2 = max(worst_ln2, abs(dpo_loss(PolicyParams(ref, ref), ds, beta) - math.log(2)))
        p = PolicyParams(rng.normal(size=ds.dim), ref)
        a = dpo_gradient(p, ds, beta)
        num = finite_difference_gradient(p, ds, beta)
        rel = np.max(np.abs(a - num) / np.maximum(np.abs(num), 1e-8))
        worst_rel = max(worst_rel, float(rel))
    report_ = train(DpoConfig(learning_rate=0.5, steps=500), synthetic_dataset(32, 4, seed=0))
    reduction = 1 - report_.final_loss / report_.initial_loss
    elapsed = time.perf_counter() - start
    passed = (
        worst_ln2 <= 1e-12
        and worst_rel <= 1e-4
        and report_.params.weights[0] < 0
        and reduction >= 0.5
        and elapsed < 30.0
    )
    detail = (
        f"ln2 error {worst_ln2:.1e}, gradient rel error {worst_rel:.1e}, "
        f"node weight {report_.params.weights[0]:.3f}, loss cut {reduction:.0%}, {elapsed:.1f}s"
    )
    return passed, detail


def test_criterion_6_dpo():
    passed, detail = criterion_6()
    report(6, "preference loss, gradient and training", passed, detail)
    assert passed, detail


# -- 7 -----------------------------------------------------------------------


def criterion_7() -> tuple[bool, str]:
    small = tflops(1220, BackboneSpec(8_000_000_000))
    large = tflops(800, BackboneSpec(72_000_000_000))
    passed = abs(small - 19.52) <= 0.05 and abs(large - 115.2) <= 0.05
    return passed, f"{small:.2f} and {large:.1f} TFLOPs"


def test_criterion_7_tflops():
    passed, detail = criterion_7()
    report(7, "compute arithmetic at anchor points", passed, detail)
    assert passed, detail


# -- 8 -----------------------------------------------------------------------


def wide() -> TaskGraph:
    return TaskGraph.build(
        "wide",
        [vx("v1", R), vx("v2", R), vx("v3", L, "v1"), vx("v4", L, "v2"), vx("v5", L, "v3", "v4"), vx("v6", E, "v5")],
        "v6",
    )


def fault_corpus() -> list[tuple[str, TaskGraph, dict]]:
    graphs = {"chain2": chain(2), "chain5": chain(5), "diamond": diamond(), "fig3": fig3(), "wide": wide()}
    corpus = []
    for gname, graph in graphs.items():
        for rate, omega, low in ((0.0, 3, 0.9), (0.2, 3, 0.6), (0.5, 2, 0.3), (1.0, 1, 0.9), (0.3, 5, 0.2)):
            config = {
                "budget": {"omega_max": omega},
                "experts": {"mode": "fault", "failure_rate": rate, "seed": len(corpus), "confidence_range": [low, 0.95]},
            }
            corpus.append((f"{gname}-r{rate}-o{omega}", graph, config))
    return corpus


def criterion_8() -> tuple[bool, str]:
    corpus = fault_corpus()
    statuses: dict[str, int] = {}
    failures = []
    for name, graph, config in corpus:
        r = run_recorded(graph.to_dict(), None, config)
        statuses[r.status.value] = statuses.get(r.status.value, 0) + 1
        try:
            replayed = replay(r).dumps() == r.dumps()
        except Exception as exc:  # record and keep going
            replayed = False
            failures.append(f"{name}: {exc}")
        if not (replayed and strict_isolation_check(r) and r.status in RunStatus):
            failures.append(name)
    passed = len(corpus) >= 20 and not failures
    summary = ", ".join(f"{k} {v}" for k, v in sorted(statuses.items()))
    return passed, f"{len(corpus)} scenarios ({summary}); problems: {failures or 'none'}"


def test_criterion_8_fault_corpus():
    passed, detail = criterion_8()
    report(8, "fault-injection corpus replays with isolation intact", passed, detail)
    assert passed, detail


if __name__ == "__main__":
    from conftest import SCENARIO_DIR

    paths = {k: SCENARIO_DIR / f"abs_equation.{k}.json" for k in ("graph", "scenario", "config")}
    checks = [
        (1, "memory bound independent of pool size", criterion_1),
        (2, "suspension logic matches direct evaluation", criterion_2),
        (3, "repair budget terminates adversarial runs", criterion_3),
        (4, "absolute-value equation replay", lambda: criterion_4(paths)),
        (5, "critic veto and sub-linear penalty", criterion_5),
        (6, "preference loss, gradient and training", criterion_6),
        (7, "compute arithmetic at anchor points", criterion_7),
        (8, "fault-injection corpus replays with isolation intact", criterion_8),
    ]
    results = []
    for number, title, check in checks:
        passed, detail = check()
        report(number, title, passed, detail)
        results.append(passed)
    sys.exit(0 if all(results) else 1)
