"""
End-to-end acceptance checks on synthetic traffic

Coverage:
- Perturbation constraints for every method, selector and setting
- Zero-budget identities
- Directional attack, selector, setting and defense effects on 30-node, 2000-step data (slow)
"""

import pytest
import sys
from itertools import product
from pathlib import Path

import numpy as np

# Add src to path
src_path = Path(__file__).parent.parent / "src"
sys.path.insert(0, str(src_path))

from stadv.attacks import AttackConfig, AttackMethod, AttackSetting, attack_split, evaluate_attack
from stadv.data import generate_synthetic, prepare_dataset, stack_inputs, stack_labels
from stadv.defense import DefenseConfig, DefenseStrategy, defend
from stadv.forecaster import ModelConfig, STModel, TrainConfig, persistence_forecast, predict_batch, train
from stadv.metrics import g_mae
from stadv.victims import Selector, budget_from_fraction

NODES, STEPS, WINDOW, HORIZON = 30, 2000, 12, 12
EPOCHS = 10


def training(seed: int, epochs: int = EPOCHS) -> TrainConfig:
    return TrainConfig(epochs=epochs, learning_rate=0.01, batch_size=64, seed=seed)


def build_run(seed: int, nodes: int = NODES, steps: int = STEPS, window: int = WINDOW, horizon: int = HORIZON,
              epochs: int = EPOCHS):
    """Synthetic dataset, target model and surrogate for one seed"""
    graph, series = generate_synthetic(nodes, steps, seed, window, horizon)
    split = prepare_dataset(series, graph, window, horizon)
    fitted = []
    for model_seed in (seed, seed + 1):
        model = STModel.create(ModelConfig(n=nodes, window=window, horizon=horizon, hidden=16, seed=model_seed), graph)
        model, _ = train(model, split, training(model_seed, epochs))
        fitted.append(model)
    return graph, split, fitted[0], fitted[1]


def attacked_g_mae(run, setting, selector=Selector.TDNS, method=AttackMethod.STPGD, target=None, epsilon=0.5):
    graph, split, model, surrogate = run
    cfg = AttackConfig(epsilon=epsilon, alpha=0.1, iterations=5, budget=budget_from_fraction(0.1, graph.n),
                       selector=selector, method=method, seed=0)
    clean, results = attack_split(AttackSetting(setting), target or model, split, cfg, graph, surrogate)
    return evaluate_attack(target or model, clean, results, split.normalizer)


# Fixtures
@pytest.fixture(scope="module")
def small_run():
    return build_run(seed=1, nodes=10, steps=500, window=6, horizon=3, epochs=2)


@pytest.fixture(scope="module")
def seeded_runs():
    return [build_run(seed) for seed in range(1, 6)]


@pytest.fixture(scope="module")
def defended_models(seeded_runs):
    """AT, Mixup and AT-TDNS models for the first three seeds"""
    models = []
    for graph, split, model, _ in seeded_runs[:3]:
        inner = AttackConfig(epsilon=0.5, alpha=0.1, iterations=5, budget=budget_from_fraction(0.1, graph.n), seed=0)
        robust = {}
        for strategy in (DefenseStrategy.AT, DefenseStrategy.MIXUP, DefenseStrategy.AT_TDNS):
            cfg = DefenseConfig.for_strategy(strategy, inner, training=training(model.config.seed))
            robust[strategy], _ = defend(STModel.create(model.config, graph), split, cfg, graph)
        models.append(robust)
    return models


@pytest.mark.integration
@pytest.mark.attacks
class TestConstraintMatrix:
    """Test perturbation constraints across every attack combination"""

    @pytest.mark.parametrize("method,selector,setting", list(product(
        [AttackMethod.STPGD, AttackMethod.STMIM], list(Selector), ["grey", "white", "black"])))
    def test_constraints(self, small_run, method, selector, setting):
        graph, split, model, surrogate = small_run
        budget = budget_from_fraction(0.1, graph.n)
        cfg = AttackConfig(epsilon=0.5, budget=budget, selector=selector, method=method, seed=3)
        windows = split.test[:8]
        clean, results = attack_split(AttackSetting(setting), model, split, cfg, graph, surrogate, windows=windows)
        assert len(results) == len(clean) > 0
        for window, result in zip(clean, results):
            delta = result.adversarial_window.inputs - window.inputs
            assert np.max(np.abs(delta)) <= 0.5 + 1e-12
            assert result.mask.count <= budget
            untouched = [j for j in range(graph.n) if not result.mask.selected[j]]
            assert np.array_equal(result.adversarial_window.inputs[:, untouched], window.inputs[:, untouched])

    @pytest.mark.parametrize("method,selector,setting", list(product(
        list(AttackMethod), list(Selector), ["grey", "white", "black"])))
    def test_zero_budget_identity(self, small_run, method, selector, setting):
        graph, split, model, surrogate = small_run
        cfg = AttackConfig(epsilon=0.0, budget=1, selector=selector, method=method, seed=0)
        clean, results = attack_split(AttackSetting(setting), model, split, cfg, graph, surrogate,
                                      windows=split.test[:6])
        report = evaluate_attack(model, clean, results, split.normalizer)
        assert report.degradation_pct == 0.0
        assert report.l_mae == 0.0


@pytest.mark.slow
@pytest.mark.integration
class TestDirectionalEffects:
    """Test that attack and defense effects point the right way"""

    def test_trained_model_beats_persistence(self, seeded_runs):
        _, split, model, _ = seeded_runs[0]
        labels = stack_labels(split.test)
        forecast = split.normalizer.inverse(predict_batch(model, stack_inputs(split.test)))
        persistence = split.normalizer.inverse(np.stack([persistence_forecast(w)[..., 0] for w in split.test]))
        assert g_mae(forecast, labels) < g_mae(persistence, labels)

    def test_greybox_attack_effect(self, seeded_runs):
        for run in seeded_runs:
            report = attacked_g_mae(run, "grey")
            assert report.g_mae >= 1.5 * report.clean_g_mae

    def test_tdns_at_least_random(self, seeded_runs):
        tdns = np.mean([attacked_g_mae(run, "grey").g_mae for run in seeded_runs])
        random = np.mean([attacked_g_mae(run, "grey", Selector.RANDOM).g_mae for run in seeded_runs])
        assert tdns >= random * 0.98

    def test_setting_ordering(self, seeded_runs):
        white = np.mean([attacked_g_mae(run, "white").g_mae for run in seeded_runs])
        grey = np.mean([attacked_g_mae(run, "grey").g_mae for run in seeded_runs])
        black = np.mean([attacked_g_mae(run, "black").g_mae for run in seeded_runs])
        assert white >= grey * 0.95
        assert grey >= black * 0.95

    def test_adversarial_training_resists_pgd_random(self, seeded_runs, defended_models):
        undefended, at = [], []
        for run, robust in zip(seeded_runs, defended_models):
            undefended.append(attacked_g_mae(run, "white", Selector.RANDOM, AttackMethod.PGD).g_mae)
            at.append(attacked_g_mae(run, "white", Selector.RANDOM, AttackMethod.PGD,
                                     target=robust[DefenseStrategy.AT]).g_mae)
        assert np.mean(at) <= 0.7 * np.mean(undefended)

    def test_at_tdns_no_worse_than_at_under_stpgd_tdns(self, seeded_runs, defended_models):
        at, at_tdns = [], []
        for run, robust in zip(seeded_runs, defended_models):
            at.append(attacked_g_mae(run, "white", target=robust[DefenseStrategy.AT]).g_mae)
            at_tdns.append(attacked_g_mae(run, "white", target=robust[DefenseStrategy.AT_TDNS]).g_mae)
        assert np.mean(at_tdns) <= np.mean(at) * 1.02

    def test_mixup_between_undefended_and_at(self, seeded_runs, defended_models):
        undefended, mixup, at = [], [], []
        for run, robust in zip(seeded_runs, defended_models):
            undefended.append(attacked_g_mae(run, "white", Selector.RANDOM, AttackMethod.PGD).g_mae)
            mixup.append(attacked_g_mae(run, "white", Selector.RANDOM, AttackMethod.PGD,
                                        target=robust[DefenseStrategy.MIXUP]).g_mae)
            at.append(attacked_g_mae(run, "white", Selector.RANDOM, AttackMethod.PGD,
                                     target=robust[DefenseStrategy.AT]).g_mae)
        assert np.mean(at) * 0.98 <= np.mean(mixup) <= np.mean(undefended) * 1.02
