"""
Attack Engine
Masked iterative gradient attacks on traffic windows and their
grey-box, white-box and black-box orchestrations
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from stadv.data import (
    DatasetSplit,
    MinMaxNormalizer,
    StateWindow,
    TrafficNetwork,
    batch,
    stack_inputs,
    stack_labels,
)
from stadv.errors import AttackError, ConfigError, NumericalError, ShapeError
from stadv.forecaster import (
    STModel,
    estimate_current_state,
    loss_and_input_gradient,
    predict_batch,
    surrogate_label,
)
from stadv.metrics import MetricsReport, build_report
from stadv.victims import Selector, VictimMask, select_by_topology, select_random, select_topk, tdns_saliency
from stadv.workers import parallel_map

logger = logging.getLogger(__name__)

PERTURBATION_COLUMNS = ["anchor", "step", "node", "delta"]


class AttackMethod(Enum):
    """Iterative update rule; the ST variants mask every step, the plain ones only the result"""
    STPGD = "STPGD"
    STMIM = "STMIM"
    PGD = "PGD"
    MIM = "MIM"

    @property
    def masked(self) -> bool:
        return self in (AttackMethod.STPGD, AttackMethod.STMIM)

    @property
    def momentum(self) -> bool:
        return self in (AttackMethod.STMIM, AttackMethod.MIM)

    @classmethod
    def parse(cls, name: str) -> "AttackMethod":
        for method in cls:
            if method.value.lower() == name.lower():
                return method
        raise ConfigError(f"unknown method '{name}' (choose from {', '.join(m.value.lower() for m in cls)})")


class AttackSetting(Enum):
    GREY = "grey"
    WHITE = "white"
    BLACK = "black"

    @classmethod
    def parse(cls, name: str) -> "AttackSetting":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(f"unknown setting '{name}' (choose from grey, white, black)") from None


@dataclass(frozen=True)
class AttackConfig:
    """Budgets and schedule of one attack"""
    epsilon: float = 0.5
    alpha: float = 0.1
    iterations: int = 5
    budget: int = 1
    selector: Selector = Selector.TDNS
    method: AttackMethod = AttackMethod.STPGD
    momentum: float = 1.0
    seed: int = 0
    random_start: bool = False
    domain_clip: bool = False
    accumulate_saliency: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.budget < 1:
            raise ConfigError(f"victim budget must be >= 1, got {self.budget}")
        if self.momentum < 0:
            raise ConfigError(f"momentum must be >= 0, got {self.momentum}")

    @property
    def label(self) -> str:
        return attack_label(self.method, self.selector)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["selector"] = self.selector.value
        data["method"] = self.method.value
        return data


def attack_label(method: AttackMethod, selector: Selector) -> str:
    """Report name such as STPGD-TDNS"""
    return f"{method.value}-{selector.value}"


@dataclass(frozen=True, eq=False)
class AttackResult:
    """One adversarial window and its audit trail"""
    adversarial_window: StateWindow
    mask: VictimMask
    perturbation: np.ndarray = field(repr=False)   # (T, n, c)
    iteration_log: Tuple[float, ...] = ()
    final_loss: float = float("nan")
    transfer_loss: Optional[float] = None

    def summary(self, cfg: AttackConfig) -> Dict[str, Any]:
        return {
            "config": cfg.to_dict(),
            "anchor": self.adversarial_window.anchor,
            "final_loss": self.final_loss,
            "mask": self.mask.indices,
            "max_abs_perturbation": float(np.max(np.abs(self.perturbation))) if self.perturbation.size else 0.0,
        }


def clip_ball(candidate: np.ndarray, reference: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp candidate elementwise into [reference - epsilon, reference + epsilon]"""
    candidate = np.asarray(candidate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if candidate.shape != reference.shape:
        raise ShapeError("clip_ball", candidate.shape, reference.shape)
    return np.minimum(np.maximum(candidate, reference - epsilon), reference + epsilon)


# ---------------------------------------------------------------------------
# Iterative methods
# ---------------------------------------------------------------------------

def _as_targets(targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    return targets[..., 0] if targets.ndim == 4 else targets


def run_iterations(
    model: STModel,
    origin: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
    cfg: AttackConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Iterate the configured update on a batch

    Args:
        model: Model whose loss is maximized
        origin: (B, T, n, c) starting inputs, also the ball center
        targets: (B, tau, n) normalized labels of the loss
        mask: (T, n, c) 0/1 victim block
        cfg: Attack settings
        rng: Stream for the random start

    Returns:
        (perturbation restricted to the mask,
         (B, K) losses at each pre-update iterate,
         (B,) losses at origin + perturbation)
    """
    targets = _as_targets(targets)
    step_mask = mask if cfg.method.masked else np.ones_like(mask)
    current = origin.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        noise = rng.uniform(-cfg.epsilon / 10.0, cfg.epsilon / 10.0, size=origin.shape)
        current = clip_ball(current + noise * step_mask, origin, cfg.epsilon)

    velocity = np.zeros_like(origin)
    log = np.zeros((origin.shape[0], cfg.iterations))
    for k in range(cfg.iterations):
        try:
            losses, gradient = loss_and_input_gradient(model, current, targets)
        except NumericalError:
            raise AttackError(k, float("nan")) from None
        if not np.all(np.isfinite(losses)):
            raise AttackError(k, float(losses[~np.isfinite(losses)][0]))
        log[:, k] = losses
        if cfg.method.momentum:
            l1 = np.abs(gradient).sum(axis=(1, 2, 3), keepdims=True)
            scaled = np.where(l1 > 0, gradient / np.where(l1 > 0, l1, 1.0), gradient)
            velocity = cfg.momentum * velocity + scaled
            direction = np.sign(velocity)
        else:
            direction = np.sign(gradient)
        current = clip_ball(current + cfg.alpha * direction * step_mask, origin, cfg.epsilon)
        if cfg.domain_clip:
            current = np.clip(current, 0.0, 1.0)

    perturbation = (current - origin) * mask
    try:
        final, _ = loss_and_input_gradient(model, origin + perturbation, targets)
    except NumericalError:
        raise AttackError(cfg.iterations, float("nan")) from None
    if not np.all(np.isfinite(final)):
        raise AttackError(cfg.iterations, float(final[~np.isfinite(final)][0]))
    return perturbation, log, final


def _compose(window: StateWindow, perturbation: np.ndarray, mask: VictimMask, log: np.ndarray,
             final_loss: float, cfg: AttackConfig) -> AttackResult:
    adversarial = window.inputs + perturbation
    if cfg.domain_clip:
        adversarial = np.clip(adversarial, 0.0, 1.0)
        perturbation = adversarial - window.inputs
    return AttackResult(
        adversarial_window=StateWindow.create(adversarial, window.labels, window.anchor),
        mask=mask,
        perturbation=perturbation,
        iteration_log=tuple(float(v) for v in log),
        final_loss=float(final_loss),
    )


def _compose_batch(windows: Sequence[StateWindow], perturbation: np.ndarray, mask: VictimMask,
                   log: np.ndarray, final: np.ndarray, cfg: AttackConfig) -> List[AttackResult]:
    return [_compose(w, perturbation[b], mask, log[b], final[b], cfg) for b, w in enumerate(windows)]


def attack_window(model: STModel, window: StateWindow, targets: np.ndarray, mask: VictimMask, cfg: AttackConfig) -> AttackResult:
    """
    Run the method cfg names on one window with a given mask

    Args:
        targets: (tau, n) or (tau, n, 1) normalized labels to move away from
    """
    if mask.n != window.n:
        raise ShapeError("attack mask", (mask.n,), (window.n,), "mask and window node counts differ")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 3:
        targets = targets[..., 0]
    block = mask.as_array(window.window, window.inputs.shape[2])
    perturbation, log, final = run_iterations(model, window.inputs[None], targets[None], block, cfg)
    return _compose(window, perturbation[0], mask, log[0], final[0], cfg)


def stpgd(model: STModel, window: StateWindow, targets: np.ndarray, mask: VictimMask, cfg: AttackConfig) -> AttackResult:
    """Masked projected sign-gradient ascent on one window"""
    return attack_window(model, window, targets, mask, replace(cfg, method=AttackMethod.STPGD))


def stmim(model: STModel, window: StateWindow, targets: np.ndarray, mask: VictimMask, cfg: AttackConfig) -> AttackResult:
    """Masked momentum iterative attack with L1-normalized gradients"""
    return attack_window(model, window, targets, mask, replace(cfg, method=AttackMethod.STMIM))


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def _batch_rng(cfg: AttackConfig, batch_index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, batch_index])


def select_mask(
    model: STModel,
    windows: Sequence[StateWindow],
    targets: np.ndarray,
    cfg: AttackConfig,
    graph: Optional[TrafficNetwork],
    rng: np.random.Generator,
) -> VictimMask:
    """One mask for the whole batch"""
    n = windows[0].n
    if cfg.budget > n:
        raise ConfigError(f"victim budget {cfg.budget} exceeds node count {n}")
    if cfg.selector is Selector.TDNS:
        saliency = tdns_saliency(
            model, windows, targets, cfg.epsilon, cfg.alpha, cfg.iterations, cfg.accumulate_saliency,
        )
        return select_topk(saliency, cfg.budget)
    seed = int(rng.integers(2**31))
    if cfg.selector is Selector.RANDOM:
        return select_random(n, cfg.budget, seed)
    if graph is None:
        raise ConfigError(f"{cfg.selector.value} selection needs the sensor graph")
    return select_by_topology(cfg.selector, graph, cfg.budget, seed)


def _normalized_labels(windows: Sequence[StateWindow], normalizer: Optional[MinMaxNormalizer]) -> np.ndarray:
    labels = stack_labels(windows)
    return labels if normalizer is None else normalizer.transform(labels, clip=False)


def greybox_attack_batch(
    target: STModel,
    estimator: STModel,
    generator: STModel,
    previous: Sequence[StateWindow],
    current: Sequence[StateWindow],
    cfg: AttackConfig,
    graph: Optional[TrafficNetwork] = None,
    normalizer: Optional[MinMaxNormalizer] = None,
    batch_index: int = 0,
) -> List[AttackResult]:
    """
    Attack without current inputs or labels

    The current windows are estimated from the previous ones, surrogate
    labels are drawn from the generator, the mask and the perturbation are
    computed on the estimates, and only the final perturbation is added onto
    the true current windows.

    Args:
        target: Model being attacked
        estimator: Predicts the current window from the previous one
        generator: Produces surrogate labels
        previous: Windows ending T steps before each current window
        current: True windows; only their inputs are read, at composition
        cfg: Attack settings
        graph: Needed by topology selectors
        normalizer: Used for the estimated windows' placeholder labels
        batch_index: Sub-stream index for this batch's randomness

    Returns:
        One result per current window
    """
    if len(previous) != len(current) or not previous:
        raise ConfigError("grey-box batch needs one previous window per current window")
    rng = _batch_rng(cfg, batch_index)
    estimated = [estimate_current_state(estimator, p, normalizer) for p in previous]
    seeds = rng.integers(2**31, size=len(estimated))
    surrogate = np.stack([
        surrogate_label(generator, w, cfg.epsilon, int(s))[..., 0] for w, s in zip(estimated, seeds)
    ])
    mask = select_mask(target, estimated, surrogate, cfg, graph, rng)
    block = mask.as_array(estimated[0].window, estimated[0].inputs.shape[2])
    perturbation, log, final = run_iterations(target, stack_inputs(estimated), surrogate, block, cfg, rng)
    logger.debug("grey-box batch %d: mask=%s", batch_index, mask.indices)
    return _compose_batch(current, perturbation, mask, log, final, cfg)


def whitebox_attack_batch(
    target: STModel,
    windows: Sequence[StateWindow],
    cfg: AttackConfig,
    graph: Optional[TrafficNetwork] = None,
    normalizer: Optional[MinMaxNormalizer] = None,
    batch_index: int = 0,
) -> List[AttackResult]:
    """Attack with the true inputs and labels"""
    if not windows:
        raise ConfigError("white-box batch is empty")
    rng = _batch_rng(cfg, batch_index)
    labels = _normalized_labels(windows, normalizer)
    mask = select_mask(target, windows, labels, cfg, graph, rng)
    block = mask.as_array(windows[0].window, windows[0].inputs.shape[2])
    perturbation, log, final = run_iterations(target, stack_inputs(windows), labels, block, cfg, rng)
    logger.debug("white-box batch %d: mask=%s", batch_index, mask.indices)
    return _compose_batch(windows, perturbation, mask, log, final, cfg)


def blackbox_attack_batch(
    surrogate: STModel,
    target: STModel,
    previous: Sequence[StateWindow],
    current: Sequence[StateWindow],
    cfg: AttackConfig,
    graph: Optional[TrafficNetwork] = None,
    normalizer: Optional[MinMaxNormalizer] = None,
    batch_index: int = 0,
) -> List[AttackResult]:
    """Grey-box attack crafted on a surrogate, then transferred to the target

    The target only scores the composed windows (transfer_loss).
    """
    results = greybox_attack_batch(
        surrogate, surrogate, surrogate, previous, current, cfg, graph, normalizer, batch_index,
    )
    labels = _normalized_labels(current, normalizer)
    if np.all(np.isfinite(labels)):
        adversarial = stack_inputs([r.adversarial_window for r in results])
        losses, _ = loss_and_input_gradient(target, adversarial, labels)
        results = [replace(r, transfer_loss=float(loss)) for r, loss in zip(results, losses)]
    return results


def greybox_attack(
    target: STModel,
    estimator: STModel,
    generator: STModel,
    previous: StateWindow,
    cfg: AttackConfig,
    current: StateWindow,
    graph: Optional[TrafficNetwork] = None,
    normalizer: Optional[MinMaxNormalizer] = None,
) -> AttackResult:
    return greybox_attack_batch(target, estimator, generator, [previous], [current], cfg, graph, normalizer)[0]


def whitebox_attack(
    target: STModel,
    window: StateWindow,
    cfg: AttackConfig,
    graph: Optional[TrafficNetwork] = None,
    normalizer: Optional[MinMaxNormalizer] = None,
) -> AttackResult:
    return whitebox_attack_batch(target, [window], cfg, graph, normalizer)[0]


def blackbox_attack(
    surrogate: STModel,
    target: STModel,
    previous: StateWindow,
    cfg: AttackConfig,
    current: StateWindow,
    graph: Optional[TrafficNetwork] = None,
    normalizer: Optional[MinMaxNormalizer] = None,
) -> AttackResult:
    return blackbox_attack_batch(surrogate, target, [previous], [current], cfg, graph, normalizer)[0]


# ---------------------------------------------------------------------------
# Dataset-level runs and evaluation
# ---------------------------------------------------------------------------

def attack_split(
    setting: AttackSetting,
    target: STModel,
    split: DatasetSplit,
    cfg: AttackConfig,
    graph: Optional[TrafficNetwork] = None,
    surrogate: Optional[STModel] = None,
    batch_size: int = 64,
    jobs: Optional[int] = 1,
    windows: Optional[Sequence[StateWindow]] = None,
) -> Tuple[List[StateWindow], List[AttackResult]]:
    """
    Attack the test windows (or the given ones) batch by batch

    Grey-box and black-box runs skip windows without a previous window.

    Returns:
        (attacked clean windows, results) in matching order
    """
    pool = list(split.test if windows is None else windows)
    if setting is not AttackSetting.WHITE:
        kept = [w for w in pool if split.previous(w) is not None]
        if len(kept) < len(pool):
            logger.info("Skipping %d window(s) without a previous window", len(pool) - len(kept))
        pool = kept
    if not pool:
        raise ConfigError("no windows to attack")
    if setting is AttackSetting.BLACK and surrogate is None:
        raise ConfigError("black-box attacks need a surrogate model")

    batches = batch(pool, batch_size)

    def run(item: Tuple[int, List[StateWindow]]) -> List[AttackResult]:
        index, chunk = item
        if setting is AttackSetting.WHITE:
            return whitebox_attack_batch(target, chunk, cfg, graph, split.normalizer, index)
        previous = [split.previous(w) for w in chunk]
        if setting is AttackSetting.GREY:
            return greybox_attack_batch(target, target, target, previous, chunk, cfg, graph, split.normalizer, index)
        return blackbox_attack_batch(surrogate, target, previous, chunk, cfg, graph, split.normalizer, index)

    nested = parallel_map(run, list(enumerate(batches)), jobs)
    results = [r for part in nested for r in part]
    logger.info("%s %s attack on %d windows in %d batches", setting.value, cfg.label, len(results), len(batches))
    return pool, results


def predictions(
    target: STModel,
    clean_windows: Sequence[StateWindow],
    results: Sequence[AttackResult],
    normalizer: Optional[MinMaxNormalizer] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(attacked, clean, labels) arrays of shape (m, tau, n) in raw units"""
    if len(clean_windows) != len(results) or not results:
        raise ConfigError("need one result per clean window")
    clean = predict_batch(target, stack_inputs(clean_windows))
    attacked = predict_batch(target, stack_inputs([r.adversarial_window for r in results]))
    if normalizer is not None:
        clean, attacked = normalizer.inverse(clean), normalizer.inverse(attacked)
    return attacked, clean, stack_labels(clean_windows)


def evaluate_attack(
    target: STModel,
    clean_windows: Sequence[StateWindow],
    results: Sequence[AttackResult],
    normalizer: Optional[MinMaxNormalizer] = None,
) -> MetricsReport:
    """Metrics of the target on clean versus attacked windows, in raw units"""
    return build_report(*predictions(target, clean_windows, results, normalizer))


def write_perturbation_csv(results: Sequence[AttackResult], path: str) -> Path:
    """Rows of anchor,step,node,delta for every nonzero entry (feature 0)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = []
    for result in results:
        delta = result.perturbation[:, :, 0]
        steps, nodes = np.nonzero(delta)
        blocks.append(pd.DataFrame({
            "anchor": np.full(steps.size, result.adversarial_window.anchor, dtype=np.int64),
            "step": steps.astype(np.int64),
            "node": nodes.astype(np.int64),
            "delta": delta[steps, nodes].astype(np.float64),
        }))
    frame = pd.concat(blocks, ignore_index=True) if blocks else pd.DataFrame(columns=PERTURBATION_COLUMNS)
    frame.to_csv(path, index=False, columns=PERTURBATION_COLUMNS, lineterminator="\n")
    return path
