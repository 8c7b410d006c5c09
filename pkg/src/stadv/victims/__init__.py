"""
Victim Selection
Time-dependent node saliency and topology baselines for choosing attacked nodes
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from stadv.data import StateWindow, TrafficNetwork, stack_inputs
from stadv.errors import ConfigError, ShapeError
from stadv.forecaster import STModel, loss_and_input_gradient

logger = logging.getLogger(__name__)

SCORE_DECIMALS = 12


class Selector(Enum):
    """Victim selection strategy"""
    TDNS = "TDNS"
    RANDOM = "Random"
    DEGREE = "Degree"
    BETWEENNESS = "Betweenness"
    PAGERANK = "PageRank"

    @classmethod
    def parse(cls, name: str) -> "Selector":
        for selector in cls:
            if selector.value.lower() == name.lower():
                return selector
        raise ConfigError(f"unknown selector '{name}' (choose from {', '.join(s.value for s in cls)})")


@dataclass(frozen=True, eq=False)
class SaliencyVector:
    """Per-node saliency scores and the batch-averaged input gradient they came from"""
    per_node: np.ndarray = field(repr=False)         # (n,)
    fused_gradient: np.ndarray = field(repr=False)   # (T, n, c)


@dataclass(frozen=True)
class VictimMask:
    """Nodes whose inputs may be perturbed; constant over a window's T steps"""
    selected: tuple
    budget: int

    @classmethod
    def from_indices(cls, n: int, indices: Sequence[int], budget: Optional[int] = None) -> "VictimMask":
        chosen = set(int(i) for i in indices)
        if any(not 0 <= i < n for i in chosen):
            raise ConfigError(f"victim index out of range for n={n}: {sorted(chosen)}")
        budget = len(chosen) if budget is None else budget
        if len(chosen) > budget:
            raise ConfigError(f"{len(chosen)} victims exceed budget {budget}")
        return cls(tuple(i in chosen for i in range(n)), budget)

    @classmethod
    def empty(cls, n: int) -> "VictimMask":
        return cls(tuple(False for _ in range(n)), 0)

    @property
    def n(self) -> int:
        return len(self.selected)

    @property
    def indices(self) -> List[int]:
        return [i for i, chosen in enumerate(self.selected) if chosen]

    @property
    def count(self) -> int:
        return sum(self.selected)

    def as_array(self, window: int = 1, features: int = 1) -> np.ndarray:
        """0/1 block of shape (T, n, c)"""
        column = np.array(self.selected, dtype=np.float64)
        return np.broadcast_to(column[None, :, None], (window, self.n, features)).copy()


def _check_budget(budget: int, n: int) -> None:
    if not 1 <= budget <= n:
        raise ConfigError(f"victim budget must be in [1, {n}], got {budget}")


def budget_from_fraction(fraction: float, n: int) -> int:
    """Victim count ceil(fraction * n), clamped to [1, n]"""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"victim fraction must be in (0, 1], got {fraction}")
    return max(1, min(n, math.ceil(fraction * n - 1e-12)))


def _top(scores: np.ndarray, budget: int) -> VictimMask:
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return VictimMask.from_indices(len(scores), order[:budget], budget)


# ---------------------------------------------------------------------------
# Saliency
# ---------------------------------------------------------------------------

def tdns_saliency(
    model: STModel,
    windows: Sequence[StateWindow],
    targets: np.ndarray,
    epsilon: float,
    alpha: float,
    iterations: int,
    accumulate: bool = False,
) -> SaliencyVector:
    """
    Time-dependent node saliency over a batch

    Each sample runs `iterations` unmasked sign-gradient steps inside the
    epsilon-ball around its inputs. The input gradient at the final iterate
    is averaged over the batch, passed through ReLU and reduced to one L2
    norm per node over the time and feature axes.

    Args:
        model: Model being attacked (or its surrogate)
        windows: Batch of (estimated) input windows
        targets: (B, tau, n) or (B, tau, n, 1) normalized target labels
        epsilon: Ball radius, >= 0
        alpha: Step size, > 0
        iterations: Inner step count, >= 1
        accumulate: Average the gradients read at every iterate instead

    Returns:
        SaliencyVector
    """
    if not windows:
        raise ConfigError("saliency needs a non-empty batch")
    if epsilon < 0 or not alpha > 0 or iterations < 1:
        raise ConfigError(f"invalid saliency settings: epsilon={epsilon}, alpha={alpha}, K={iterations}")
    origin = stack_inputs(windows)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 4:
        targets = targets[..., 0]
    if targets.shape[0] != origin.shape[0]:
        raise ShapeError("tdns_saliency", origin.shape, targets.shape, "batch sizes differ")

    current = origin.copy()
    total = np.zeros_like(origin)
    for _ in range(iterations):
        _, gradient = loss_and_input_gradient(model, current, targets)
        if accumulate:
            total += gradient
        current = np.clip(current + alpha * np.sign(gradient), origin - epsilon, origin + epsilon)
    _, gradient = loss_and_input_gradient(model, current, targets)
    if accumulate:
        gradient = (total + gradient) / (iterations + 1)

    fused = gradient.mean(axis=0)
    per_node = np.sqrt(np.sum(np.maximum(fused, 0.0) ** 2, axis=(0, 2)))
    return SaliencyVector(per_node=per_node, fused_gradient=fused)


def write_saliency_csv(saliency: SaliencyVector, path: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"node": np.arange(len(saliency.per_node)), "score": np.asarray(saliency.per_node, dtype=np.float64)})
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


# ---------------------------------------------------------------------------
# Selectors
# ---------------------------------------------------------------------------

def select_topk(saliency: SaliencyVector, budget: int) -> VictimMask:
    """Largest scores first, lower index wins ties"""
    _check_budget(budget, len(saliency.per_node))
    return _top(np.asarray(saliency.per_node), budget)


def select_random(n: int, budget: int, seed: int) -> VictimMask:
    _check_budget(budget, n)
    rng = np.random.default_rng(seed)
    return VictimMask.from_indices(n, rng.choice(n, size=budget, replace=False), budget)


def select_degree(graph: TrafficNetwork, budget: int) -> VictimMask:
    _check_budget(budget, graph.n)
    return _top(np.asarray(graph.degrees, dtype=np.float64), budget)


def betweenness_scores(graph: TrafficNetwork) -> np.ndarray:
    """Brandes betweenness on unweighted shortest paths of the undirected graph"""
    n = graph.n
    neighbors = [graph.neighbors(v) for v in range(n)]
    centrality = np.zeros(n)
    for source in range(n):
        stack = []
        predecessors: List[List[int]] = [[] for _ in range(n)]
        sigma = np.zeros(n)
        sigma[source] = 1.0
        distance = np.full(n, -1)
        distance[source] = 0
        queue = deque([source])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in neighbors[v]:
                if distance[w] < 0:
                    queue.append(w)
                    distance[w] = distance[v] + 1
                if distance[w] == distance[v] + 1:
                    sigma[w] += sigma[v]
                    predecessors[w].append(v)
        delta = np.zeros(n)
        while stack:
            w = stack.pop()
            for v in predecessors[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != source:
                centrality[w] += delta[w]
    return centrality / 2.0  # each unordered pair was counted from both ends


def select_betweenness(graph: TrafficNetwork, budget: int) -> VictimMask:
    _check_budget(budget, graph.n)
    return _top(np.round(betweenness_scores(graph), SCORE_DECIMALS), budget)


def transition_matrix(graph: TrafficNetwork) -> np.ndarray:
    """Row-stochastic random-walk matrix; rows of isolated nodes are uniform"""
    links = (graph.adjacency > 0.0).astype(np.float64)
    degree = links.sum(axis=1, keepdims=True)
    uniform = np.full_like(links, 1.0 / graph.n)
    return np.where(degree > 0, links / np.where(degree > 0, degree, 1.0), uniform)


def pagerank_scores(graph: TrafficNetwork, damping: float = 0.85, iterations: int = 100) -> np.ndarray:
    """Power iteration with uniform teleport"""
    if graph.n < 1:
        raise ConfigError("PageRank needs a non-empty graph")
    if not 0.0 <= damping <= 1.0 or iterations < 1:
        raise ConfigError(f"invalid PageRank settings: damping={damping}, iterations={iterations}")
    transition = transition_matrix(graph)
    scores = np.full(graph.n, 1.0 / graph.n)
    for _ in range(iterations):
        scores = (1.0 - damping) / graph.n + damping * (transition.T @ scores)
    return scores


def select_pagerank(graph: TrafficNetwork, budget: int, damping: float = 0.85, iterations: int = 100) -> VictimMask:
    _check_budget(budget, graph.n)
    return _top(np.round(pagerank_scores(graph, damping, iterations), SCORE_DECIMALS), budget)


def select_by_topology(selector: Selector, graph: TrafficNetwork, budget: int, seed: int) -> VictimMask:
    """Masks that do not depend on the model or the window"""
    if selector is Selector.RANDOM:
        return select_random(graph.n, budget, seed)
    if selector is Selector.DEGREE:
        return select_degree(graph, budget)
    if selector is Selector.BETWEENNESS:
        return select_betweenness(graph, budget)
    if selector is Selector.PAGERANK:
        return select_pagerank(graph, budget)
    raise ConfigError(f"{selector.value} needs a model and a batch")
