"""Preference pairs and DPO training of a linear-logit planner policy.

The policy scores each candidate trajectory of a query with ``w . f`` and
normalizes with a softmax over that query's candidate set, so

    log pi(tau | x) = w . f(tau) - logsumexp_{tau' in set} w . f(tau')

which keeps the implicit reward and the DPO loss exact and their gradients
closed-form.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from healdag.critic import Trajectory
from healdag.errors import DegenerateSetError, DivergenceError, EmptyBatchError
from healdag.graph import ExpertKind

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "node_count",
    "reconstructions",
    "n_rag",
    "n_logic",
    "n_expr",
    "mean_confidence",
    "depth",
)

Array = NDArray[np.float64]


def raw_features(traj: Trajectory) -> list[float]:
    graph = traj.final_graph
    kinds = [v.expert_kind for v in graph.vertices.values()]
    confidences = [fb.confidence for fb in traj.feedbacks]
    ranks = graph.topological_ranks()
    return [
        float(traj.node_count),
        float(traj.reconstructions),
        float(kinds.count(ExpertKind.RAG)),
        float(kinds.count(ExpertKind.LOGIC)),
        float(kinds.count(ExpertKind.EXPR)),
        float(np.mean(confidences)) if confidences else 0.0,
        float(max(ranks.values(), default=0) + 1),
    ]


def standardize(matrix: Array) -> tuple[Array, Array, Array]:
    """Zero-mean, unit-variance columns; constant columns map to zero."""
    matrix = np.asarray(matrix, dtype=float)
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    return (matrix - mean) / safe, mean, safe


# -- policy -----------------------------------------------------------------


def log_softmax_scores(weights: Array, candidate_set: Array) -> Array:
    scores = np.asarray(candidate_set, dtype=float) @ np.asarray(weights, dtype=float)
    top = scores.max()
    return scores - (top + np.log(np.exp(scores - top).sum()))


def policy_logprob(weights: Array, candidate: Array, candidate_set: Array) -> float:
    candidate_set = np.atleast_2d(np.asarray(candidate_set, dtype=float))
    if candidate_set.shape[0] < 2:
        raise ValueError("a candidate set needs at least two trajectories")
    matches = np.flatnonzero(np.all(candidate_set == np.asarray(candidate, dtype=float), axis=1))
    if matches.size == 0:
        raise ValueError("candidate is not a member of candidate_set")
    if np.all(candidate_set == candidate_set[0]):
        log.warning("degenerate candidate set: all feature vectors identical")
        return -math.log(candidate_set.shape[0])
    return float(log_softmax_scores(weights, candidate_set)[matches[0]])


def check_candidate_set(candidate_set: Array) -> None:
    """Raise DegenerateSetError for sets that cannot express any preference."""
    candidate_set = np.atleast_2d(candidate_set)
    if np.all(candidate_set == candidate_set[0]):
        raise DegenerateSetError("all feature vectors in the candidate set are identical")


@dataclass
class PolicyParams:
    weights: Array
    reference_weights: Array

    def __post_init__(self) -> None:
        self.weights = np.array(self.weights, dtype=float)
        ref = np.array(self.reference_weights, dtype=float)
        ref.flags.writeable = False
        self.reference_weights = ref
        if self.weights.shape != ref.shape:
            raise ValueError("weights and reference_weights differ in shape")

    @classmethod
    def zeros(cls, dim: int) -> PolicyParams:
        return cls(np.zeros(dim), np.zeros(dim))


def implicit_reward(
    params: PolicyParams, candidate: Array, candidate_set: Array, beta: float
) -> float:
    return beta * (
        policy_logprob(params.weights, candidate, candidate_set)
        - policy_logprob(params.reference_weights, candidate, candidate_set)
    )


# -- dataset ----------------------------------------------------------------


@dataclass(frozen=True)
class PreferencePair:
    query_id: str
    chosen: int
    rejected: int
    reward_gap: float


@dataclass
class CandidateGroup:
    """All candidates of one query with frozen standardization statistics."""

    query_id: str
    raw: Array
    rewards: Array
    legal: Sequence[bool]
    mean: Array = field(init=False)
    std: Array = field(init=False)
    features: Array = field(init=False)

    def __post_init__(self) -> None:
        self.raw = np.asarray(self.raw, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.features, self.mean, self.std = standardize(self.raw)


@dataclass
class PreferenceDataset:
    groups: list[CandidateGroup]
    pairs: list[PreferencePair]
    feature_names: tuple[str, ...] = FEATURE_NAMES

    @property
    def dim(self) -> int:
        return self.groups[0].features.shape[1]

    def to_dict(self) -> dict[str, Any]:
        by_query: dict[str, list[list[int]]] = {}
        gaps: dict[str, list[float]] = {}
        for p in self.pairs:
            by_query.setdefault(p.query_id, []).append([p.chosen, p.rejected])
            gaps.setdefault(p.query_id, []).append(p.reward_gap)
        return {
            "feature_names": list(self.feature_names),
            "queries": [
                {
                    "query_id": g.query_id,
                    "raw_features": g.raw.tolist(),
                    "mean": g.mean.tolist(),
                    "std": g.std.tolist(),
                    "features": g.features.tolist(),
                    "rewards": g.rewards.tolist(),
                    "legal": list(g.legal),
                    "pairs": by_query.get(g.query_id, []),
                    "reward_gaps": gaps.get(g.query_id, []),
                }
                for g in self.groups
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> PreferenceDataset:
        groups, pairs = [], []
        for q in doc["queries"]:
            group = CandidateGroup(q["query_id"], q["raw_features"], q["rewards"], q["legal"])
            group.mean = np.asarray(q["mean"], dtype=float)
            group.std = np.asarray(q["std"], dtype=float)
            group.features = np.asarray(q["features"], dtype=float)
            groups.append(group)
            gaps = q.get("reward_gaps") or [
                float(group.rewards[w] - group.rewards[lo]) for w, lo in q["pairs"]
            ]
            for (w, lo), gap in zip(q["pairs"], gaps):
                pairs.append(PreferencePair(q["query_id"], int(w), int(lo), float(gap)))
        return cls(groups, pairs, tuple(doc.get("feature_names", FEATURE_NAMES)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> PreferenceDataset:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_pairs(
    candidates: Mapping[str, Sequence[tuple[Trajectory, float]]],
    epsilon: float,
    allow_vetoed_rejected: bool = True,
) -> list[PreferencePair]:
    """Every (higher, lower) pair per query whose reward gap is at least epsilon.

    A vetoed (illegal) trajectory never appears as chosen; it may appear as
    rejected unless ``allow_vetoed_rejected`` is off.
    """
    pairs = []
    for query_id in sorted(candidates):
        items = candidates[query_id]
        for i, (traj_i, r_i) in enumerate(items):
            for j, (traj_j, r_j) in enumerate(items):
                gap = r_i - r_j
                if gap <= 0 or gap < epsilon:
                    continue
                if not all(traj_i.per_node_legality):
                    continue
                if not allow_vetoed_rejected and not all(traj_j.per_node_legality):
                    continue
                pairs.append(PreferencePair(query_id, i, j, gap))
    return pairs


def build_dataset(
    candidates: Mapping[str, Sequence[tuple[Trajectory, float]]],
    epsilon: float,
    allow_vetoed_rejected: bool = True,
) -> PreferenceDataset:
    groups = []
    for query_id in sorted(candidates):
        items = candidates[query_id]
        groups.append(
            CandidateGroup(
                query_id,
                [raw_features(t) for t, _ in items],
                [r for _, r in items],
                [all(t.per_node_legality) for t, _ in items],
            )
        )
    return PreferenceDataset(groups, build_pairs(candidates, epsilon, allow_vetoed_rejected))


# -- loss and gradient ------------------------------------------------------


@dataclass(frozen=True)
class _Batch:
    sets: list[Array]
    chosen: NDArray[np.int64]
    rejected: NDArray[np.int64]
    group: NDArray[np.int64]


def _batch(dataset: PreferenceDataset, pairs: Sequence[PreferencePair] | None = None) -> _Batch:
    pairs = dataset.pairs if pairs is None else pairs
    if not pairs:
        raise EmptyBatchError("no preference pairs in batch")
    index = {g.query_id: i for i, g in enumerate(dataset.groups)}
    return _Batch(
        [g.features for g in dataset.groups],
        np.array([p.chosen for p in pairs]),
        np.array([p.rejected for p in pairs]),
        np.array([index[p.query_id] for p in pairs]),
    )


def _margins(params: PolicyParams, batch: _Batch, beta: float) -> tuple[Array, Array]:
    """Implicit-reward margins and the per-pair gradient of those margins."""
    margins = np.empty(batch.chosen.size)
    grads = np.empty((batch.chosen.size, params.weights.size))
    for g, feats in enumerate(batch.sets):
        mask = batch.group == g
        if not mask.any():
            continue
        lp = log_softmax_scores(params.weights, feats)
        lp_ref = log_softmax_scores(params.reference_weights, feats)
        r = beta * (lp - lp_ref)
        expected = np.exp(lp) @ feats
        # d log pi(tau) / dw = f(tau) - E_pi[f]
        dlp = feats - expected
        w, lo = batch.chosen[mask], batch.rejected[mask]
        margins[mask] = r[w] - r[lo]
        grads[mask] = beta * (dlp[w] - dlp[lo])
    return margins, grads


def _log_sigmoid(x: Array) -> Array:
    return -np.logaddexp(0.0, -x)


def dpo_loss(
    params: PolicyParams,
    dataset: PreferenceDataset,
    beta: float,
    pairs: Sequence[PreferencePair] | None = None,
) -> float:
    margins, _ = _margins(params, _batch(dataset, pairs), beta)
    return float(-_log_sigmoid(margins).mean())


def dpo_gradient(
    params: PolicyParams,
    dataset: PreferenceDataset,
    beta: float,
    pairs: Sequence[PreferencePair] | None = None,
) -> Array:
    margins, grads = _margins(params, _batch(dataset, pairs), beta)
    # d/dm [-log sigma(m)] = -sigma(-m)
    weight = -np.exp(_log_sigmoid(-margins))
    return (weight[:, None] * grads).mean(axis=0)


def finite_difference_gradient(
    params: PolicyParams, dataset: PreferenceDataset, beta: float, step: float = 1e-5
) -> Array:
    grad = np.zeros_like(params.weights)
    for i in range(params.weights.size):
        up = params.weights.copy()
        down = params.weights.copy()
        up[i] += step
        down[i] -= step
        hi = dpo_loss(PolicyParams(up, params.reference_weights), dataset, beta)
        lo = dpo_loss(PolicyParams(down, params.reference_weights), dataset, beta)
        grad[i] = (hi - lo) / (2 * step)
    return grad


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1
    epsilon: float = 0.05
    learning_rate: float = 0.05
    steps: int = 500
    candidates_per_query: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.learning_rate < 0 or self.steps < 0 or self.epsilon < 0:
            raise ValueError("learning_rate, steps and epsilon must be non-negative")
        if self.candidates_per_query < 2:
            raise ValueError("candidates_per_query must be at least 2")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> DpoConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown DPO config key(s): {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainingReport:
    params: PolicyParams
    initial_loss: float
    losses: list[float]
    config: DpoConfig

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else self.initial_loss

    def to_dict(self, feature_names: Sequence[str] = FEATURE_NAMES) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "feature_names": list(feature_names),
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "weights": self.params.weights.tolist(),
            "reference_weights": self.params.reference_weights.tolist(),
            "losses": self.losses,
        }


def train(
    config: DpoConfig, dataset: PreferenceDataset, params: PolicyParams | None = None
) -> TrainingReport:
    """Full-batch gradient descent; ``losses[k]`` is the loss after update k+1."""
    if not dataset.pairs:
        raise EmptyBatchError("training needs at least one preference pair")
    params = params or PolicyParams.zeros(dataset.dim)
    current = PolicyParams(params.weights.copy(), params.reference_weights)
    initial = dpo_loss(current, dataset, config.beta)
    losses: list[float] = []
    for step in range(config.steps):
        grad = dpo_gradient(current, dataset, config.beta)
        current.weights = current.weights - config.learning_rate * grad
        loss = dpo_loss(current, dataset, config.beta)
        if not math.isfinite(loss) or not np.all(np.isfinite(current.weights)):
            raise DivergenceError(step, loss)
        losses.append(loss)
    return TrainingReport(current, initial, losses, config)


# -- synthetic data ---------------------------------------------------------


def synthetic_dataset(
    n_queries: int = 32,
    candidates_per_query: int = 4,
    seed: int = 0,
    epsilon: float = 0.05,
    preferred: str = "fewer_nodes",
    noise_features: int = 1,
) -> PreferenceDataset:
    """Candidate sets where the reward depends on node count alone.

    Features are ``node_count`` followed by ``noise_features`` columns of
    irrelevant noise. ``preferred="fewer_nodes"`` rewards small graphs.
    """
    rng = np.random.default_rng(seed)
    sign = -1.0 if preferred == "fewer_nodes" else 1.0
    groups, pairs = [], []
    names = ("node_count",) + tuple(f"noise_{i}" for i in range(noise_features))
    for q in range(n_queries):
        query_id = f"q{q:03d}"
        counts = rng.choice(np.arange(2, 15), size=candidates_per_query, replace=False)
        noise = rng.normal(size=(candidates_per_query, noise_features))
        raw = np.column_stack([counts.astype(float), noise])
        rewards = sign * 0.1 * counts.astype(float)
        groups.append(CandidateGroup(query_id, raw, rewards, [True] * candidates_per_query))
        for i in range(candidates_per_query):
            for j in range(candidates_per_query):
                gap = float(rewards[i] - rewards[j])
                if gap > 0 and gap >= epsilon:
                    pairs.append(PreferencePair(query_id, i, j, gap))
    return PreferenceDataset(groups, pairs, names)
