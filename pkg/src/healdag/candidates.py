"""Sampling candidate trajectories for preference data.

A seeded stochastic planner proposes topology variants for each query; each
variant runs through the real engine with fault-injecting experts and is
scored by the critic.
"""

from __future__ import annotations

import random
from collections.abc import Sequence
from dataclasses import dataclass, field

from healdag.config import EngineConfig, ExpertsConfig
from healdag.critic import CriticConfig, Trajectory, reward, trajectory_from_run
from healdag.dpo import DpoConfig, PreferenceDataset, build_dataset
from healdag.engine import build_experts, run
from healdag.graph import ExpertKind, NodeId, TaskGraph, Vertex
from healdag.reconstructor import PlannerReply, RepairContext, ScriptedPlanner, Subgraph


def random_plan(query: str, rng: random.Random, min_nodes: int = 2, max_nodes: int = 8) -> TaskGraph:
    """A random single-sink DAG whose sink is an EXPR node."""
    n = rng.randint(min_nodes, max_nodes)
    vertices: list[Vertex] = []
    for i in range(n - 1):
        node = NodeId(f"v{i + 1}")
        kind = rng.choice([ExpertKind.RAG, ExpertKind.LOGIC])
        pool = [v.id for v in vertices]
        k = rng.randint(0, min(2, len(pool)))
        parents = tuple(sorted(rng.sample(pool, k), key=str))
        vertices.append(Vertex(node, kind, f"step {i + 1} of: {query}", parents))
    has_child = {p for v in vertices for p in v.parents}
    leaves = tuple(v.id for v in vertices if v.id not in has_child)
    sink = NodeId(f"v{n}")
    vertices.append(Vertex(sink, ExpertKind.EXPR, f"answer: {query}", leaves))
    return TaskGraph.build(query, vertices, sink)


@dataclass
class StochasticPlanner:
    """Seeded planner that samples an initial topology and repairs mechanically."""

    seed: int
    min_nodes: int = 2
    max_nodes: int = 8
    tokens_per_call: int = 40
    _delegate: ScriptedPlanner | None = field(default=None, init=False, repr=False)

    def initial_plan(self, query: str) -> PlannerReply[TaskGraph]:
        rng = random.Random(f"{self.seed}:{query}")
        graph = random_plan(query, rng, self.min_nodes, self.max_nodes)
        self._delegate = ScriptedPlanner(graph, self.tokens_per_call, self.tokens_per_call // 2)
        return self._delegate.initial_plan(query)

    def propose_patch(self, failed: Vertex, graph: TaskGraph, context: RepairContext):
        assert self._delegate is not None
        return self._delegate.propose_patch(failed, graph, context)

    def propose_subgraph(
        self, root: Vertex, graph: TaskGraph, removed: frozenset[NodeId], context: RepairContext
    ) -> PlannerReply[Subgraph | None]:
        assert self._delegate is not None
        return self._delegate.propose_subgraph(root, graph, removed, context)


def sample_candidates(
    queries: Sequence[str],
    dpo: DpoConfig,
    critic: CriticConfig | None = None,
    failure_rate: float = 0.15,
    confidence_range: tuple[float, float] = (0.3, 1.0),
) -> dict[str, list[tuple[Trajectory, float]]]:
    critic = critic or CriticConfig()
    out: dict[str, list[tuple[Trajectory, float]]] = {}
    for qi, query in enumerate(queries):
        items = []
        for c in range(dpo.candidates_per_query):
            seed = dpo.seed * 1_000_003 + qi * 1009 + c
            config = EngineConfig(
                experts=ExpertsConfig(
                    mode="fault",
                    seed=seed,
                    failure_rate=failure_rate,
                    confidence_range=confidence_range,
                )
            )
            result = run(query, StochasticPlanner(seed), build_experts(config), config)
            traj = trajectory_from_run(result, trajectory_id=f"q{qi:03d}-c{c}")
            items.append((traj, reward(traj, critic)))
        out[f"q{qi:03d}"] = items
    return out


def make_dataset(
    queries: Sequence[str], dpo: DpoConfig, critic: CriticConfig | None = None
) -> PreferenceDataset:
    return build_dataset(sample_candidates(queries, dpo, critic), dpo.epsilon)
