"""
Defense
Adversarial training, clean/adversarial sample mixing and adversarial
training with saliency-selected victims
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from stadv.attacks import AttackConfig, AttackMethod, whitebox_attack_batch
from stadv.data import DatasetSplit, StateWindow, TrafficNetwork, stack_inputs
from stadv.errors import ConfigError
from stadv.forecaster import STModel, TrainConfig, TrainHistory, train
from stadv.victims import Selector

logger = logging.getLogger(__name__)


class DefenseStrategy(Enum):
    AT = "AT"
    MIXUP = "Mixup"
    AT_TDNS = "AT-TDNS"

    @classmethod
    def parse(cls, name: str) -> "DefenseStrategy":
        for strategy in cls:
            if strategy.value.lower() == name.lower():
                return strategy
        raise ConfigError(f"unknown strategy '{name}' (choose from at, mixup, at-tdns)")

    @property
    def selector(self) -> Selector:
        return Selector.TDNS if self is DefenseStrategy.AT_TDNS else Selector.RANDOM


@dataclass
class DefenseConfig:
    """Robust-training settings"""
    strategy: DefenseStrategy = DefenseStrategy.AT
    inner_attack: AttackConfig = field(default_factory=AttackConfig)
    mix_ratio: float = 0.5
    training: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ConfigError(f"mix ratio must be in [0, 1], got {self.mix_ratio}")

    @classmethod
    def for_strategy(cls, strategy: DefenseStrategy, inner_attack: AttackConfig, **kwargs: Any) -> "DefenseConfig":
        """Config whose inner attack uses the strategy's selector with STPGD updates"""
        inner = replace(inner_attack, selector=strategy.selector, method=AttackMethod.STPGD)
        return cls(strategy=strategy, inner_attack=inner, **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "strategy": self.strategy.value,
            "inner_attack": self.inner_attack.to_dict(),
            "mix_ratio": self.mix_ratio,
            "training": self.training.to_dict(),
        }


def _adversarial_inputs(
    model: STModel,
    windows: List[StateWindow],
    step: int,
    cfg: DefenseConfig,
    split: DatasetSplit,
    graph: Optional[TrafficNetwork],
) -> np.ndarray:
    """White-box adversarial inputs for one batch against the current weights"""
    results = whitebox_attack_batch(model, windows, cfg.inner_attack, graph, split.normalizer, batch_index=step)
    return stack_inputs([r.adversarial_window for r in results])


def _check_selector(cfg: DefenseConfig, expected: Selector) -> None:
    if cfg.inner_attack.selector is not expected:
        raise ConfigError(
            f"{cfg.strategy.value} needs the {expected.value} selector, got {cfg.inner_attack.selector.value}"
        )


def adversarial_train(
    model: STModel,
    split: DatasetSplit,
    cfg: DefenseConfig,
    graph: Optional[TrafficNetwork] = None,
) -> Tuple[STModel, TrainHistory]:
    """
    Fit on freshly generated PGD-Random adversarial windows only

    Args:
        model: Initial model
        split: Dataset with labels
        cfg: Defense settings; the inner attack must use the Random selector
        graph: Sensor graph, forwarded to the inner attack

    Returns:
        (robust model, history)
    """
    _check_selector(cfg, Selector.RANDOM)
    hook = lambda current, windows, step: _adversarial_inputs(current, windows, step, cfg, split, graph)
    return train(model, split, cfg.training, perturb=hook)


def at_tdns_train(
    model: STModel,
    split: DatasetSplit,
    cfg: DefenseConfig,
    graph: Optional[TrafficNetwork] = None,
) -> Tuple[STModel, TrainHistory]:
    """As adversarial_train with STPGD-TDNS as the inner attack"""
    _check_selector(cfg, Selector.TDNS)
    hook = lambda current, windows, step: _adversarial_inputs(current, windows, step, cfg, split, graph)
    return train(model, split, cfg.training, perturb=hook)


def mixup_train(
    model: STModel,
    split: DatasetSplit,
    cfg: DefenseConfig,
    graph: Optional[TrafficNetwork] = None,
) -> Tuple[STModel, TrainHistory]:
    """
    Fit on batches where each sample is adversarial with probability mix_ratio

    The Bernoulli draws come from their own stream so the shuffle and the
    inner attack see the same randomness as the other strategies.
    """
    _check_selector(cfg, Selector.RANDOM)
    coins = np.random.default_rng([cfg.training.seed, 1])

    def hook(current: STModel, windows: List[StateWindow], step: int) -> np.ndarray:
        clean = stack_inputs(windows)
        chosen = coins.random(len(windows)) < cfg.mix_ratio
        if not chosen.any():
            return clean
        adversarial = _adversarial_inputs(current, windows, step, cfg, split, graph)
        return np.where(chosen[:, None, None, None], adversarial, clean)

    return train(model, split, cfg.training, perturb=hook)


def defend(
    model: STModel,
    split: DatasetSplit,
    cfg: DefenseConfig,
    graph: Optional[TrafficNetwork] = None,
) -> Tuple[STModel, TrainHistory]:
    """Dispatch on cfg.strategy"""
    logger.info("Training with %s defense (inner attack %s, eps=%s)",
                cfg.strategy.value, cfg.inner_attack.label, cfg.inner_attack.epsilon)
    if cfg.strategy is DefenseStrategy.AT:
        return adversarial_train(model, split, cfg, graph)
    if cfg.strategy is DefenseStrategy.MIXUP:
        return mixup_train(model, split, cfg, graph)
    return at_tdns_train(model, split, cfg, graph)
