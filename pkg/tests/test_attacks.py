"""
Unit tests for the attack engine

Coverage:
- Budget and mask invariants of every iterative method
- Exact trajectories on a linear model and the ascent rate over random trials
- Random start and domain clipping
- Grey-box independence from current inputs and labels
- White-box and black-box orchestration, dataset runs and reports
"""

import pytest
import sys
from pathlib import Path

import numpy as np

# Add src to path
src_path = Path(__file__).parent.parent / "src"
sys.path.insert(0, str(src_path))

from stadv.attacks import (
    AttackConfig,
    AttackError,
    AttackMethod,
    AttackSetting,
    attack_split,
    attack_window,
    blackbox_attack_batch,
    clip_ball,
    evaluate_attack,
    greybox_attack_batch,
    stmim,
    stpgd,
    whitebox_attack,
    whitebox_attack_batch,
    write_perturbation_csv,
)
from stadv.data import StateWindow, TrafficNetwork, generate_synthetic, prepare_dataset
from stadv.errors import ConfigError, ShapeError
from stadv.forecaster import ModelConfig, STModel, loss_and_input_gradient
from stadv.victims import Selector, VictimMask, budget_from_fraction


def linear_model(n: int = 2) -> STModel:
    """forecast_i = mean of node i's two inputs"""
    graph = TrafficNetwork.from_edges(n, [(i, i + 1, 1.0) for i in range(n - 1)])
    config = ModelConfig(n=n, window=2, horizon=1, conv_layers=0, graph_layers=0)
    return STModel.create(config, graph).with_params({"head.w": np.array([[1.0]]), "head.b": np.zeros(1)})


def random_windows(count: int, n: int = 5, seed: int = 0, start: int = 3):
    rng = np.random.default_rng(seed)
    return [
        StateWindow.create(rng.uniform(0, 1, (4, n, 1)), rng.uniform(0, 1, (2, n)), start + 4 * i)
        for i in range(count)
    ]


# Fixtures
@pytest.fixture
def graph():
    return TrafficNetwork.from_edges(5, [(0, 1, 1.0), (1, 2, 0.5), (2, 3, 1.0), (3, 4, 0.7), (0, 4, 0.9)])


@pytest.fixture
def model(graph):
    return STModel.create(ModelConfig(n=5, window=4, horizon=2, hidden=4, seed=1), graph)


@pytest.fixture
def synthetic_split():
    graph, series = generate_synthetic(6, 200, seed=0)
    return graph, prepare_dataset(series, graph, 4, 2)


@pytest.mark.attacks
class TestIterations:
    """Test the iterative update rules"""

    @pytest.mark.parametrize("method", list(AttackMethod))
    @pytest.mark.parametrize("seed", range(5))
    def test_perturbation_stays_in_ball(self, model, method, seed):
        rng = np.random.default_rng(seed)
        window = random_windows(1, seed=seed)[0]
        epsilon = float(rng.uniform(0.05, 1.0))
        cfg = AttackConfig(epsilon=epsilon, alpha=float(rng.uniform(0.01, 0.5)), iterations=7, method=method)
        result = attack_window(model, window, window.labels, VictimMask.from_indices(5, [1, 3]), cfg)
        assert np.max(np.abs(result.perturbation)) <= epsilon + 1e-12

    @pytest.mark.parametrize("method", list(AttackMethod))
    def test_unmasked_nodes_untouched(self, model, method):
        window = random_windows(1, seed=4)[0]
        mask = VictimMask.from_indices(5, [0, 2])
        result = attack_window(model, window, window.labels, mask, AttackConfig(method=method, random_start=True))
        for node in (1, 3, 4):
            assert np.all(result.perturbation[:, node] == 0.0)
            assert np.array_equal(result.adversarial_window.inputs[:, node], window.inputs[:, node])

    @pytest.mark.parametrize("method", list(AttackMethod))
    def test_zero_epsilon_is_identity(self, model, method):
        window = random_windows(1, seed=2)[0]
        cfg = AttackConfig(epsilon=0.0, method=method, random_start=True)
        result = attack_window(model, window, window.labels, VictimMask.from_indices(5, [0, 1, 2]), cfg)
        assert np.all(result.perturbation == 0.0)
        assert np.array_equal(result.adversarial_window.inputs, window.inputs)

    def test_linear_trajectory(self):
        window = StateWindow.create(np.full((2, 2, 1), 0.5), np.zeros((1, 2)), anchor=1)
        cfg = AttackConfig(epsilon=0.3, alpha=0.1, iterations=5)
        result = stpgd(linear_model(), window, np.zeros((1, 2)), VictimMask.from_indices(2, [0, 1]), cfg)
        assert result.iteration_log == pytest.approx([0.5, 0.6, 0.7, 0.8, 0.8])
        assert result.final_loss == pytest.approx(0.8)
        assert np.allclose(result.perturbation, 0.3)

    def test_momentum_matches_sign_steps_for_constant_gradient(self):
        window = StateWindow.create(np.full((2, 2, 1), 0.5), np.zeros((1, 2)), anchor=1)
        cfg = AttackConfig(epsilon=0.3, alpha=0.1, iterations=5)
        mask = VictimMask.from_indices(2, [1])
        plain = stpgd(linear_model(), window, np.zeros((1, 2)), mask, cfg)
        momentum = stmim(linear_model(), window, np.zeros((1, 2)), mask, cfg)
        assert np.allclose(plain.perturbation, momentum.perturbation)

    def test_attack_increases_loss(self, model):
        window = random_windows(1, seed=7)[0]
        result = stpgd(model, window, window.labels, VictimMask.from_indices(5, [0, 1, 2, 3, 4]), AttackConfig(alpha=0.02))
        assert result.final_loss >= result.iteration_log[0]

    def test_random_start_is_seeded(self, model):
        window = random_windows(1, seed=1)[0]
        cfg = AttackConfig(random_start=True, seed=3, iterations=1, alpha=0.01)
        mask = VictimMask.from_indices(5, [2])
        first = attack_window(model, window, window.labels, mask, cfg)
        second = attack_window(model, window, window.labels, mask, cfg)
        assert np.array_equal(first.perturbation, second.perturbation)

    def test_domain_clip(self):
        window = StateWindow.create(np.full((2, 2, 1), 0.95), np.zeros((1, 2)), anchor=1)
        mask = VictimMask.from_indices(2, [0, 1])
        clipped = stpgd(linear_model(), window, np.zeros((1, 2)), mask, AttackConfig(epsilon=0.5, domain_clip=True))
        free = stpgd(linear_model(), window, np.zeros((1, 2)), mask, AttackConfig(epsilon=0.5))
        assert clipped.adversarial_window.inputs.max() <= 1.0
        assert free.adversarial_window.inputs.max() > 1.0

    def test_non_finite_loss(self, model, mocker):
        window = random_windows(1)[0]
        mocker.patch(
            "stadv.attacks.loss_and_input_gradient",
            return_value=(np.array([np.nan]), np.zeros((1, 4, 5, 1))),
        )
        with pytest.raises(AttackError) as info:
            stpgd(model, window, window.labels, VictimMask.from_indices(5, [0]), AttackConfig())
        assert info.value.iteration == 0

    def test_mask_size_mismatch(self, model):
        window = random_windows(1)[0]
        with pytest.raises(ShapeError):
            stpgd(model, window, window.labels, VictimMask.from_indices(3, [0]), AttackConfig())

    def test_clip_ball(self):
        clipped = clip_ball(np.array([0.0, 0.5, 2.0]), np.array([0.5, 0.5, 0.5]), 0.25)
        assert clipped.tolist() == [0.25, 0.5, 0.75]


@pytest.mark.attacks
class TestLossTrajectory:
    """Test the ascent property of STPGD over many random trials"""

    def test_stpgd_loss_non_decreasing_in_most_trials(self):
        graph, series = generate_synthetic(10, 400, seed=0)
        split = prepare_dataset(series, graph, 12, 12)
        budget = budget_from_fraction(0.1, graph.n)
        rng = np.random.default_rng(0)
        non_decreasing = 0
        for trial in range(100):
            model = STModel.create(ModelConfig(n=graph.n, seed=trial), graph)
            window = split.test[int(rng.integers(len(split.test)))]
            mask = VictimMask.from_indices(graph.n, rng.choice(graph.n, size=budget, replace=False))
            targets = split.normalizer.transform(window.labels, clip=False)
            result = stpgd(model, window, targets, mask, AttackConfig(budget=budget, seed=trial))
            non_decreasing += bool(np.all(np.diff(result.iteration_log) >= -1e-12))
        assert non_decreasing >= 90


@pytest.mark.attacks
class TestConfig:
    """Test attack settings"""

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            AttackConfig(epsilon=-0.1)
        with pytest.raises(ConfigError):
            AttackConfig(alpha=0.0)
        with pytest.raises(ConfigError):
            AttackConfig(iterations=0)

    def test_label(self):
        assert AttackConfig().label == "STPGD-TDNS"
        assert AttackConfig(method=AttackMethod.MIM, selector=Selector.PAGERANK).label == "MIM-PageRank"

    def test_parse(self):
        assert AttackMethod.parse("stmim") is AttackMethod.STMIM
        assert AttackSetting.parse("Grey") is AttackSetting.GREY
        with pytest.raises(ConfigError):
            AttackMethod.parse("fgsm")
        with pytest.raises(ConfigError):
            AttackSetting.parse("purple")


@pytest.mark.attacks
class TestSettings:
    """Test grey-box, white-box and black-box orchestration"""

    def test_greybox_ignores_current_inputs_and_labels(self, model):
        previous = random_windows(3, seed=1, start=3)
        current_a = [StateWindow.create(w.inputs, np.full((2, 5), np.nan), w.anchor + 4) for w in random_windows(3, seed=2)]
        current_b = [StateWindow.create(w.inputs * 0.5, np.full((2, 5), np.nan), w.anchor + 4) for w in random_windows(3, seed=3)]
        cfg = AttackConfig(budget=2)
        first = greybox_attack_batch(model, model, model, previous, current_a, cfg)
        second = greybox_attack_batch(model, model, model, previous, current_b, cfg)
        for a, b in zip(first, second):
            assert np.array_equal(a.perturbation, b.perturbation)
            assert a.mask == b.mask

    def test_greybox_adds_onto_true_inputs(self, model):
        previous = random_windows(2, seed=1)
        current = random_windows(2, seed=5)
        results = greybox_attack_batch(model, model, model, previous, current, AttackConfig(budget=2))
        for window, result in zip(current, results):
            assert np.array_equal(result.adversarial_window.inputs, window.inputs + result.perturbation)
            assert result.adversarial_window.anchor == window.anchor

    def test_perfect_estimates_match_whitebox(self, model, mocker):
        previous = random_windows(2, seed=1, start=3)
        current = random_windows(2, seed=8, start=7)
        truth = {p.anchor: c for p, c in zip(previous, current)}
        mocker.patch("stadv.attacks.estimate_current_state", side_effect=lambda est, prev, norm: truth[prev.anchor])
        mocker.patch("stadv.attacks.surrogate_label", side_effect=lambda gen, w, eps, seed: w.labels[:, :, None])
        cfg = AttackConfig(budget=2)
        grey = greybox_attack_batch(model, model, model, previous, current, cfg)
        white = whitebox_attack_batch(model, current, cfg)
        for g, w in zip(grey, white):
            assert np.array_equal(g.perturbation, w.perturbation)

    def test_greybox_needs_matching_batches(self, model):
        with pytest.raises(ConfigError):
            greybox_attack_batch(model, model, model, random_windows(2), random_windows(1), AttackConfig())

    def test_topology_selector_needs_graph(self, model, graph):
        window = random_windows(1)[0]
        cfg = AttackConfig(selector=Selector.DEGREE, budget=1)
        with pytest.raises(ConfigError):
            whitebox_attack(model, window, cfg)
        result = whitebox_attack(model, window, cfg, graph=graph)
        assert result.mask.count == 1

    def test_random_selector_is_seeded(self, model):
        window = random_windows(1)[0]
        cfg = AttackConfig(selector=Selector.RANDOM, budget=2, seed=4)
        assert whitebox_attack(model, window, cfg).mask == whitebox_attack(model, window, cfg).mask

    def test_budget_exceeds_nodes(self, model):
        with pytest.raises(ConfigError):
            whitebox_attack(model, random_windows(1)[0], AttackConfig(budget=6))

    def test_blackbox_scores_target(self, model, graph):
        surrogate = STModel.create(ModelConfig(n=5, window=4, horizon=2, hidden=4, seed=9), graph)
        previous, current = random_windows(2, seed=1), random_windows(2, seed=2, start=7)
        results = blackbox_attack_batch(surrogate, model, previous, current, AttackConfig(budget=2))
        adversarial = np.stack([r.adversarial_window.inputs for r in results])
        labels = np.stack([w.labels for w in current])
        losses, _ = loss_and_input_gradient(model, adversarial, labels)
        assert [r.transfer_loss for r in results] == pytest.approx(losses.tolist())

    def test_blackbox_with_target_as_surrogate(self, model):
        previous, current = random_windows(2, seed=1), random_windows(2, seed=2, start=7)
        cfg = AttackConfig(budget=2)
        black = blackbox_attack_batch(model, model, previous, current, cfg)
        grey = greybox_attack_batch(model, model, model, previous, current, cfg)
        for b, g in zip(black, grey):
            assert np.array_equal(b.perturbation, g.perturbation)

    def test_blackbox_without_labels(self, model, graph):
        surrogate = STModel.create(ModelConfig(n=5, window=4, horizon=2, hidden=4, seed=9), graph)
        current = [StateWindow.create(w.inputs, np.full((2, 5), np.nan), w.anchor) for w in random_windows(1)]
        result = blackbox_attack_batch(surrogate, model, random_windows(1), current, AttackConfig())[0]
        assert result.transfer_loss is None


@pytest.mark.attacks
class TestDatasetRuns:
    """Test split-level attacks and their reports"""

    def test_whitebox_split(self, synthetic_split):
        graph, split = synthetic_split
        model = STModel.create(ModelConfig(n=6, window=4, horizon=2, hidden=4), graph)
        clean, results = attack_split(AttackSetting.WHITE, model, split, AttackConfig(budget=2), batch_size=8)
        assert len(clean) == len(results) == len(split.test)
        assert all(r.mask.count == 2 for r in results)

    def test_jobs_do_not_change_results(self, synthetic_split):
        graph, split = synthetic_split
        model = STModel.create(ModelConfig(n=6, window=4, horizon=2, hidden=4), graph)
        cfg = AttackConfig(budget=2, random_start=True)
        _, serial = attack_split(AttackSetting.GREY, model, split, cfg, batch_size=8, jobs=1)
        _, threaded = attack_split(AttackSetting.GREY, model, split, cfg, batch_size=8, jobs=3)
        for a, b in zip(serial, threaded):
            assert np.array_equal(a.perturbation, b.perturbation)

    def test_greybox_skips_windows_without_history(self, synthetic_split):
        graph, split = synthetic_split
        model = STModel.create(ModelConfig(n=6, window=4, horizon=2, hidden=4), graph)
        first_train = split.train[:6]
        clean, _ = attack_split(AttackSetting.GREY, model, split, AttackConfig(budget=1), windows=first_train)
        assert [w.anchor for w in clean] == [w.anchor for w in first_train[4:]]

    def test_blackbox_needs_surrogate(self, synthetic_split):
        graph, split = synthetic_split
        model = STModel.create(ModelConfig(n=6, window=4, horizon=2, hidden=4), graph)
        with pytest.raises(ConfigError):
            attack_split(AttackSetting.BLACK, model, split, AttackConfig())

    def test_zero_budget_attack_has_no_effect(self, synthetic_split):
        graph, split = synthetic_split
        model = STModel.create(ModelConfig(n=6, window=4, horizon=2, hidden=4), graph)
        clean, results = attack_split(AttackSetting.WHITE, model, split, AttackConfig(epsilon=0.0))
        report = evaluate_attack(model, clean, results, split.normalizer)
        assert report.l_mae == 0.0
        assert report.degradation_pct == 0.0
        assert report.g_mae == report.clean_g_mae

    def test_perturbation_csv(self, model, tmp_path):
        window = random_windows(1)[0]
        result = stpgd(model, window, window.labels, VictimMask.from_indices(5, [1]), AttackConfig())
        path = write_perturbation_csv([result], str(tmp_path / "p.csv"))
        lines = path.read_text().splitlines()
        assert lines[0] == "anchor,step,node,delta"
        assert len(lines) - 1 == int(np.count_nonzero(result.perturbation))
        assert all(line.split(",")[2] == "1" for line in lines[1:])
