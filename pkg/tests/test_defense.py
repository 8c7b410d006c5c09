"""
Unit tests for robust training

Coverage:
- Degenerate settings reduce to clean training
- Mixing ratio extremes
- Selector checks, strategy parsing and dispatch
- Inner attacks see the running weights and a fresh step index
"""

import pytest
import sys
from pathlib import Path

import numpy as np

# Add src to path
src_path = Path(__file__).parent.parent / "src"
sys.path.insert(0, str(src_path))

import stadv.defense as defense_module
from stadv.attacks import AttackConfig, AttackMethod
from stadv.data import generate_synthetic, prepare_dataset
from stadv.defense import (
    DefenseConfig,
    DefenseStrategy,
    adversarial_train,
    at_tdns_train,
    defend,
    mixup_train,
)
from stadv.errors import ConfigError
from stadv.forecaster import ModelConfig, STModel, TrainConfig, train
from stadv.victims import Selector


def same_params(left: STModel, right: STModel) -> bool:
    return all(np.array_equal(left.params[name], right.params[name]) for name in left.params)


# Fixtures
@pytest.fixture(scope="module")
def setup():
    graph, series = generate_synthetic(6, 120, seed=0)
    split = prepare_dataset(series, graph, 4, 2)
    model = STModel.create(ModelConfig(n=6, window=4, horizon=2, hidden=4, seed=3), graph)
    return graph, split, model


@pytest.fixture
def training():
    return TrainConfig(epochs=2, batch_size=16, seed=5)


def config_for(strategy, training, epsilon=0.3):
    inner = AttackConfig(epsilon=epsilon, alpha=0.1, iterations=2, budget=2)
    return DefenseConfig.for_strategy(strategy, inner, training=training)


@pytest.mark.defense
class TestDegenerateSettings:
    """Test settings that must reproduce clean training"""

    def test_zero_epsilon_matches_clean_training(self, setup, training):
        graph, split, model = setup
        clean, _ = train(model, split, training)
        robust, _ = adversarial_train(model, split, config_for(DefenseStrategy.AT, training, epsilon=0.0), graph)
        assert same_params(clean, robust)

    def test_zero_ratio_matches_clean_training(self, setup, training):
        graph, split, model = setup
        clean, _ = train(model, split, training)
        cfg = DefenseConfig.for_strategy(
            DefenseStrategy.MIXUP, AttackConfig(budget=2, iterations=2), training=training, mix_ratio=0.0,
        )
        mixed, _ = mixup_train(model, split, cfg, graph)
        assert same_params(clean, mixed)

    def test_full_ratio_matches_adversarial_training(self, setup, training):
        graph, split, model = setup
        inner = AttackConfig(budget=2, iterations=2)
        at, _ = adversarial_train(model, split, DefenseConfig.for_strategy(DefenseStrategy.AT, inner, training=training), graph)
        cfg = DefenseConfig.for_strategy(DefenseStrategy.MIXUP, inner, training=training, mix_ratio=1.0)
        mixed, _ = mixup_train(model, split, cfg, graph)
        assert same_params(at, mixed)

    def test_adversarial_training_changes_weights(self, setup, training):
        graph, split, model = setup
        clean, _ = train(model, split, training)
        robust, _ = adversarial_train(model, split, config_for(DefenseStrategy.AT, training), graph)
        assert not same_params(clean, robust)


@pytest.mark.defense
class TestInnerAttack:
    """Test how the inner attack is driven"""

    def test_step_index_increments(self, setup, training, mocker):
        graph, split, model = setup
        spy = mocker.spy(defense_module, "whitebox_attack_batch")
        at_tdns_train(model, split, config_for(DefenseStrategy.AT_TDNS, training), graph)
        steps = [call.kwargs["batch_index"] for call in spy.call_args_list]
        batches_per_epoch = -(-len(split.train) // training.batch_size)
        assert steps == list(range(training.epochs * batches_per_epoch))

    def test_inner_attack_uses_strategy_selector(self, setup, training, mocker):
        graph, split, model = setup
        spy = mocker.spy(defense_module, "whitebox_attack_batch")
        adversarial_train(model, split, config_for(DefenseStrategy.AT, training), graph)
        cfg = spy.call_args_list[0].args[2]
        assert cfg.selector is Selector.RANDOM
        assert cfg.method is AttackMethod.STPGD


@pytest.mark.defense
class TestDefenseConfig:
    """Test configuration checks and dispatch"""

    def test_for_strategy_selectors(self):
        assert DefenseConfig.for_strategy(DefenseStrategy.AT, AttackConfig()).inner_attack.selector is Selector.RANDOM
        assert DefenseConfig.for_strategy(DefenseStrategy.AT_TDNS, AttackConfig()).inner_attack.selector is Selector.TDNS

    def test_selector_mismatch(self, setup, training):
        graph, split, model = setup
        cfg = DefenseConfig(strategy=DefenseStrategy.AT, inner_attack=AttackConfig(), training=training)
        with pytest.raises(ConfigError):
            adversarial_train(model, split, cfg, graph)

    def test_mix_ratio_range(self):
        with pytest.raises(ConfigError):
            DefenseConfig(mix_ratio=1.5)

    def test_parse(self):
        assert DefenseStrategy.parse("at-tdns") is DefenseStrategy.AT_TDNS
        assert DefenseStrategy.parse("MIXUP") is DefenseStrategy.MIXUP
        with pytest.raises(ConfigError):
            DefenseStrategy.parse("distillation")

    def test_to_dict(self):
        data = DefenseConfig.for_strategy(DefenseStrategy.MIXUP, AttackConfig()).to_dict()
        assert data["strategy"] == "Mixup"
        assert data["inner_attack"]["selector"] == "Random"

    @pytest.mark.parametrize("strategy", list(DefenseStrategy))
    def test_dispatch(self, setup, training, strategy):
        graph, split, model = setup
        robust, history = defend(model, split, config_for(strategy, training), graph)
        assert len(history.losses) == training.epochs
        assert all(np.all(np.isfinite(value)) for value in robust.params.values())
