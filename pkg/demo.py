"""
Demo script to showcase stadv features
Runs a small in-memory experiment without writing any files
"""

import sys
from pathlib import Path

# Add src to path
src_path = Path(__file__).parent / "src"
sys.path.insert(0, str(src_path))

from stadv.attacks import AttackConfig, AttackSetting, attack_split, evaluate_attack
from stadv.data import generate_synthetic, prepare_dataset
from stadv.forecaster import ModelConfig, STModel, TrainConfig, train
from stadv.metrics import compare, render_table
from stadv.theory import verify_random_suite
from stadv.victims import Selector, budget_from_fraction, pagerank_scores, select_by_topology


def demo_data():
    """Demonstrate synthetic data generation"""
    print("\n" + "="*60)
    print("SYNTHETIC TRAFFIC DEMO")
    print("="*60)

    graph, series = generate_synthetic(12, 600, seed=1, window=6, horizon=3)
    split = prepare_dataset(series, graph, window=6, horizon=3)
    print(f"\nSensors: {graph.n}  Roads: {len(graph.edges)}  Steps: {series.steps}")
    print(f"Windows (train/val/test): {split.sizes()}")
    return graph, split


def demo_training(graph, split):
    """Demonstrate forecaster training"""
    print("\n" + "="*60)
    print("FORECASTER TRAINING DEMO")
    print("="*60)

    model = STModel.create(ModelConfig(n=graph.n, window=6, horizon=3, hidden=8), graph)
    model, history = train(model, split, TrainConfig(epochs=3, learning_rate=0.01, batch_size=32))
    for epoch, loss in enumerate(history.losses, 1):
        print(f"Epoch {epoch}: loss {loss:.5f}")
    return model


def demo_victims(graph):
    """Demonstrate topology-based victim selection"""
    print("\n" + "="*60)
    print("VICTIM SELECTION DEMO")
    print("="*60)

    budget = budget_from_fraction(0.2, graph.n)
    for selector in (Selector.DEGREE, Selector.BETWEENNESS, Selector.PAGERANK):
        mask = select_by_topology(selector, graph, budget, seed=0)
        print(f"{selector.value:12s} -> {mask.indices}")
    top = pagerank_scores(graph).max()
    print(f"Highest PageRank score: {top:.4f}")


def demo_attacks(graph, split, model):
    """Demonstrate white-box and grey-box attacks"""
    print("\n" + "="*60)
    print("ATTACK DEMO")
    print("="*60)

    budget = budget_from_fraction(0.2, graph.n)
    reports = {}
    for setting in (AttackSetting.WHITE, AttackSetting.GREY):
        for selector in (Selector.TDNS, Selector.RANDOM):
            cfg = AttackConfig(epsilon=0.5, budget=budget, selector=selector)
            clean, results = attack_split(setting, model, split, cfg, graph, windows=split.test[:16])
            reports[f"{cfg.label} ({setting.value})"] = evaluate_attack(model, clean, results, split.normalizer)
    print()
    print(render_table(compare(reports)))


def demo_bound():
    """Demonstrate bound verification"""
    print("\n" + "="*60)
    print("ROBUSTNESS BOUND DEMO")
    print("="*60)

    suite = verify_random_suite(100, seed=0)
    print(f"\nTrials: {suite.trials}")
    print(f"Max gap/bound ratio: {suite.max_ratio:.4f}")


def main():
    """Run all demos"""
    print("\n" + "="*60)
    print("STADV - FEATURE DEMONSTRATION")
    print("="*60)
    print("This demo runs a small experiment in memory")

    graph, split = demo_data()
    model = demo_training(graph, split)
    demo_victims(graph)
    demo_attacks(graph, split, model)
    demo_bound()

    print("\n" + "="*60)
    print("DEMO COMPLETE!")
    print("="*60)
    print("\nTo run full experiments:")
    print("  pip install -e .")
    print("  stadv gen-data --out runs")
    print("  stadv train --out runs")
    print("  stadv attack --out runs --setting grey")
    print()


if __name__ == "__main__":
    main()
