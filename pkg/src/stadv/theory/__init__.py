"""
Theory Bound
Worst-case embedding gap of a graph-convolution stack under victim-node
perturbations, and its randomized verification
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from stadv.data import TrafficNetwork
from stadv.errors import BoundViolationError, ConfigError, ShapeError
from stadv.forecaster import Activation, STModel
from stadv.workers import parallel_map

logger = logging.getLogger(__name__)

POWER_ITERATIONS = 200
POWER_TOLERANCE = 1e-10
GAP_TOLERANCE = 1e-9


def spectral_norm(matrix: np.ndarray, iterations: int = POWER_ITERATIONS, tol: float = POWER_TOLERANCE) -> float:
    """Largest singular value by power iteration on W^T W"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeError("spectral_norm", matrix.shape, (), "expected a matrix")
    if not np.all(np.isfinite(matrix)):
        raise ConfigError("spectral_norm needs finite entries")
    if not np.any(matrix):
        return 0.0
    vector = np.random.default_rng(0).normal(size=matrix.shape[1])
    vector /= np.linalg.norm(vector)
    value = 0.0
    for _ in range(iterations):
        image = matrix.T @ (matrix @ vector)
        norm = np.linalg.norm(image)
        if norm == 0.0:
            break
        vector = image / norm
        updated = float(np.linalg.norm(matrix @ vector))
        if abs(updated - value) <= tol * max(1.0, updated):
            value = updated
            break
        value = updated
    return value


def theorem_bound(lipschitz_weight: float, beta: float, degree: float, layers: int, epsilon: float, budget: float) -> float:
    """(lambda * beta * C)^(2L) * epsilon^2 * eta"""
    if min(lipschitz_weight, beta, degree, epsilon, budget) < 0:
        raise ConfigError("bound inputs must be >= 0")
    if layers < 1:
        raise ConfigError(f"layer count must be >= 1, got {layers}")
    return (lipschitz_weight * beta * degree) ** (2 * layers) * epsilon ** 2 * budget


def per_node_l2_budget(epsilon: float, dims: int) -> float:
    """Per-node L2 radius implied by an elementwise budget over `dims` features"""
    return epsilon * math.sqrt(dims)


@dataclass(frozen=True, eq=False)
class ProofModel:
    """Pure graph-convolution stack Z(k+1) = act(E Z(k) W(k))"""
    weights: List[np.ndarray] = field(repr=False)
    aggregation: np.ndarray = field(repr=False)
    activation: Activation = Activation.RELU

    def __post_init__(self):
        if not self.weights:
            raise ConfigError("ProofModel needs at least one layer")
        if np.any(np.abs(self.aggregation) > 1.0):
            raise ConfigError("aggregation weights must satisfy |e_ij| <= 1")
        width = self.weights[0].shape[0]
        for w in self.weights:
            if w.shape[0] != width:
                raise ShapeError("ProofModel", (width,), w.shape, "layer widths do not chain")
            width = w.shape[1]

    @classmethod
    def from_graph(
        cls,
        graph: TrafficNetwork,
        dims: Sequence[int],
        seed: int,
        activation: Activation = Activation.RELU,
    ) -> "ProofModel":
        """
        Random model aggregating over graph neighbors (no self-loops)

        Args:
            graph: Sensor graph; neighbor weights are row-normalized
            dims: Layer widths [d0, d1, ..., dL]
            seed: Weight seed
        """
        rng = np.random.default_rng(seed)
        adjacency = np.array(graph.adjacency)
        rows = adjacency.sum(axis=1, keepdims=True)
        aggregation = np.divide(adjacency, rows, out=np.zeros_like(adjacency), where=rows > 0)
        weights = [rng.normal(0.0, 1.0 / math.sqrt(dims[k]), size=(dims[k], dims[k + 1])) for k in range(len(dims) - 1)]
        return cls(weights=weights, aggregation=aggregation, activation=activation)

    @classmethod
    def from_forecaster(cls, model: STModel) -> "ProofModel":
        """The graph-convolution part of a trained forecaster"""
        return cls(weights=model.graph_weights(), aggregation=model.aggregation, activation=model.activation)

    @property
    def layers(self) -> int:
        return len(self.weights)

    @property
    def beta(self) -> float:
        return self.activation.lipschitz

    @property
    def neighborhood_size(self) -> int:
        """Largest number of nonzero aggregation weights in a row"""
        return int(np.max(np.count_nonzero(self.aggregation, axis=1)))

    def max_weight_norm(self) -> float:
        return max(spectral_norm(w) for w in self.weights)

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Final embeddings of an (n, d0) input"""
        z = np.asarray(inputs, dtype=np.float64)
        if z.shape != (self.aggregation.shape[0], self.weights[0].shape[0]):
            raise ShapeError("ProofModel", z.shape, (self.aggregation.shape[0], self.weights[0].shape[0]))
        for w in self.weights:
            z = self.activation.numpy(self.aggregation @ z @ w)
        return z

    def bound(self, epsilon: float, budget: int) -> float:
        return theorem_bound(self.max_weight_norm(), self.beta, self.neighborhood_size, self.layers, epsilon, budget)


def embedding_gap(
    model: ProofModel,
    clean: np.ndarray,
    adversarial: np.ndarray,
    epsilon: Optional[float] = None,
    budget: Optional[int] = None,
) -> float:
    """
    Squared Frobenius distance between the final embeddings

    When epsilon and budget are given, the perturbation must touch at most
    `budget` nodes with per-node L2 norm at most epsilon.
    """
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if clean.shape != adversarial.shape:
        raise ShapeError("embedding_gap", clean.shape, adversarial.shape)
    difference = adversarial - clean
    norms = np.linalg.norm(difference, axis=1)
    if budget is not None and np.count_nonzero(norms) > budget:
        raise ConfigError(f"perturbation touches {np.count_nonzero(norms)} nodes, budget is {budget}")
    if epsilon is not None and np.any(norms > epsilon * (1.0 + 1e-12) + 1e-15):
        raise ConfigError(f"per-node perturbation {norms.max()} exceeds epsilon {epsilon}")
    return float(np.sum((model.forward(adversarial) - model.forward(clean)) ** 2))


@dataclass
class BoundReport:
    """Bound value and measured gaps for one model"""
    lipschitz_weight: float
    beta: float
    degree: int
    layers: int
    epsilon: float
    budget: int
    bound_value: float
    empirical_gaps: List[float] = field(default_factory=list)
    max_ratio: float = 0.0
    seed: int = 0

    @property
    def trials(self) -> int:
        return len(self.empirical_gaps)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["trials"] = self.trials
        return data


def _ratio(gap: float, bound: float) -> float:
    if bound > 0:
        return gap / bound
    return 0.0 if gap == 0 else math.inf


def trial_seed(seed: int, trial: int) -> int:
    """Reproducible per-trial seed"""
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


def _perturbed(rng: np.random.Generator, clean: np.ndarray, epsilon: float, budget: int) -> np.ndarray:
    n, d = clean.shape
    count = int(rng.integers(1, min(budget, n) + 1))
    victims = rng.choice(n, size=count, replace=False)
    adversarial = clean.copy()
    for node in victims:
        direction = rng.normal(size=d)
        direction /= max(np.linalg.norm(direction), 1e-300)
        radius = epsilon if rng.random() < 0.5 else epsilon * rng.random()
        adversarial[node] = clean[node] + radius * direction
        # renormalize against rounding so the per-node norm never exceeds epsilon
        excess = np.linalg.norm(adversarial[node] - clean[node])
        if excess > epsilon:
            adversarial[node] = clean[node] + (adversarial[node] - clean[node]) * (epsilon / excess)
    return adversarial


def verify_bound(
    model: ProofModel,
    graph: Optional[TrafficNetwork],
    epsilon: float,
    budget: int,
    trials: int,
    seed: int,
    jobs: Optional[int] = 1,
) -> BoundReport:
    """
    Check gap <= bound on random victim sets and perturbations

    Args:
        model: Proof-form model
        graph: Sensor graph, used to cross-check the aggregation support
        epsilon: Per-node L2 radius
        budget: Victim count limit
        trials: Number of random trials (>= 1)
        seed: Base seed; trial t uses trial_seed(seed, t)

    Returns:
        BoundReport

    Raises:
        BoundViolationError: carrying the violating trial's seed and data
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    if budget < 1 or epsilon < 0:
        raise ConfigError(f"invalid budget {budget} or epsilon {epsilon}")
    n, d = model.aggregation.shape[0], model.weights[0].shape[0]
    if graph is not None:
        if graph.n != n:
            raise ShapeError("verify_bound", (n,), (graph.n,), "model and graph node counts differ")
        if model.neighborhood_size < graph.max_degree:
            logger.warning("aggregation support %d is below the graph's max degree %d",
                           model.neighborhood_size, graph.max_degree)

    lam = model.max_weight_norm()
    degree = model.neighborhood_size
    bound = theorem_bound(lam, model.beta, degree, model.layers, epsilon, budget)

    def run(trial: int) -> float:
        rng = np.random.default_rng(trial_seed(seed, trial))
        clean = rng.uniform(0.0, 1.0, size=(n, d))
        adversarial = _perturbed(rng, clean, epsilon, budget)
        gap = embedding_gap(model, clean, adversarial, epsilon, budget)
        if gap > bound * (1.0 + GAP_TOLERANCE) + 1e-15:
            raise BoundViolationError(trial_seed(seed, trial), gap, bound, {
                "trial": trial,
                "clean": clean.tolist(),
                "adversarial": adversarial.tolist(),
            })
        return gap

    gaps = parallel_map(run, range(trials), jobs)
    report = BoundReport(
        lipschitz_weight=lam,
        beta=model.beta,
        degree=degree,
        layers=model.layers,
        epsilon=epsilon,
        budget=budget,
        bound_value=bound,
        empirical_gaps=gaps,
        max_ratio=max(_ratio(g, bound) for g in gaps),
        seed=seed,
    )
    logger.info("bound %.6g over %d trials, max ratio %.6g", bound, trials, report.max_ratio)
    return report


@dataclass
class SuiteReport:
    """Verification over many random graphs and models"""
    trials: int
    seed: int
    epsilon: float
    max_ratio: float
    worst: Optional[BoundReport] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trials": self.trials,
            "seed": self.seed,
            "epsilon": self.epsilon,
            "max_ratio": self.max_ratio,
            "worst": self.worst.to_dict() if self.worst else None,
            "passed": True,
        }


def random_network(rng: np.random.Generator, n: int) -> TrafficNetwork:
    """Erdos-Renyi graph with random weights in (0, 1]"""
    density = rng.uniform(0.2, 0.8)
    edges = [
        (i, j, float(1.0 - rng.random()))
        for i in range(n)
        for j in range(i + 1, n)
        if rng.random() < density
    ]
    return TrafficNetwork.from_edges(n, edges)


def verify_random_suite(
    trials: int,
    seed: int,
    epsilon: float = 0.5,
    max_nodes: int = 10,
    max_layers: int = 3,
    activation: Activation = Activation.RELU,
    jobs: Optional[int] = 1,
) -> SuiteReport:
    """One trial per random (graph, model, victim set, perturbation) draw"""
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")

    def run(trial: int) -> BoundReport:
        rng = np.random.default_rng(trial_seed(seed, trial))
        n = int(rng.integers(2, max_nodes + 1))
        layers = int(rng.integers(1, max_layers + 1))
        dims = [int(rng.integers(1, 5)) for _ in range(layers + 1)]
        graph = random_network(rng, n)
        model = ProofModel.from_graph(graph, dims, int(rng.integers(2**31)), activation)
        budget = int(rng.integers(1, n + 1))
        return verify_bound(model, graph, epsilon, budget, trials=1, seed=trial_seed(seed, trial))

    reports = parallel_map(run, range(trials), jobs)
    worst = max(reports, key=lambda r: r.max_ratio)
    logger.info("random suite: %d trials, max ratio %.6g", trials, worst.max_ratio)
    return SuiteReport(trials=trials, seed=seed, epsilon=epsilon, max_ratio=worst.max_ratio, worst=worst)
