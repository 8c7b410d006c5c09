"""
Main entry point for stadv
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from stadv import __version__
from stadv.attacks import (
    AttackConfig,
    AttackMethod,
    AttackSetting,
    attack_split,
    evaluate_attack,
    predictions,
    write_perturbation_csv,
)
from stadv.config import ConfigManager, RunConfig, StadvSettings
from stadv.data import (
    DatasetSplit,
    TrafficNetwork,
    generate_synthetic,
    load_graph_csv,
    load_speed_csv,
    prepare_dataset,
    resample,
    save_graph_csv,
    save_speed_csv,
    stack_inputs,
    stack_labels,
)
from stadv.defense import DefenseConfig, DefenseStrategy, defend
from stadv.errors import BoundViolationError, ConfigError, StadvError
from stadv.forecaster import (
    ModelConfig,
    STModel,
    TrainConfig,
    persistence_forecast,
    predict_batch,
    train,
)
from stadv.forecaster.checkpoint import load_checkpoint, save_checkpoint
from stadv.metrics import (
    aggregate_seeds,
    compare,
    g_mae,
    horizon_breakdown,
    mean_report,
    render_table,
    write_horizon_csv,
    write_report_csv,
)
from stadv.plotting import plot_reports
from stadv.theory import verify_random_suite
from stadv.victims import Selector, budget_from_fraction, tdns_saliency, write_saliency_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VIOLATION = 3

SPEED_FILE = "speeds.csv"
GRAPH_FILE = "graph.csv"
TARGET_CHECKPOINT = "target.stadv"
SWEEP_PARAMS = ("eta", "epsilon", "batch-size")


class UsageError(ConfigError):
    """Raised by the argument parser instead of exiting"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _banner(title: str) -> None:
    print("=" * 50)
    print(title)
    print("=" * 50)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value run file")
    parser.add_argument("--out", dest="output_dir", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--jobs", type=int, help="worker cap (0 = physical cores)")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data-dir", help=f"directory holding {SPEED_FILE} and {GRAPH_FILE} (default <out>/data)")
    parser.add_argument("--resample", type=int, help="average blocks of this many steps")
    parser.add_argument("--window", type=int)
    parser.add_argument("--horizon", type=int)


def _add_training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--learning-rate", type=float)
    parser.add_argument("--hidden", type=int)
    parser.add_argument("--activation", choices=["relu", "tanh", "sigmoid"])
    parser.add_argument("--batch-size", type=int)


def _add_attack(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", help=f"target model (default <out>/checkpoints/{TARGET_CHECKPOINT})")
    parser.add_argument("--setting", default="grey", choices=["grey", "white", "black"])
    parser.add_argument("--method", default="stpgd", choices=["stpgd", "stmim", "pgd", "mim"])
    parser.add_argument("--selector", default="tdns", choices=["tdns", "random", "degree", "betweenness", "pagerank"])
    parser.add_argument("--surrogate", help="surrogate checkpoint for black-box attacks")
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--eta", type=float, help="victim fraction of the nodes")
    parser.add_argument("--momentum", type=float)
    parser.add_argument("--domain-clip", action="store_true", help="keep adversarial inputs in [0, 1]")
    parser.add_argument("--random-start", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stadv", description="Adversarial robustness toolkit for traffic forecasting")
    parser.add_argument("--version", action="version", version=f"stadv {__version__}")
    commands = parser.add_subparsers(dest="command", parser_class=_Parser)
    commands.required = True

    gen = commands.add_parser("gen-data", help="write a synthetic speed series and sensor graph")
    _add_common(gen)
    gen.add_argument("--nodes", type=int)
    gen.add_argument("--steps", type=int)
    gen.add_argument("--data-dir")

    trn = commands.add_parser("train", help="train the target forecaster")
    _add_common(trn)
    _add_data(trn)
    _add_training(trn)
    trn.add_argument("--name", default="target", help="checkpoint name")

    att = commands.add_parser("attack", help="attack the test windows and report metrics")
    _add_common(att)
    _add_data(att)
    _add_attack(att)
    att.add_argument("--batch-size", type=int)
    att.add_argument("--saliency-csv", help="write TDNS scores of the first test batch to this file")

    dfd = commands.add_parser("defend", help="robust training followed by an attack evaluation")
    _add_common(dfd)
    _add_data(dfd)
    _add_training(dfd)
    _add_attack(dfd)
    dfd.add_argument("--strategy", default="at", choices=["at", "mixup", "at-tdns"])
    dfd.add_argument("--mix-ratio", type=float)
    dfd.add_argument("--seeds", type=int, help="independent training runs to average (default 3)")

    bnd = commands.add_parser("verify-bound", help="check the embedding-gap bound on random models")
    _add_common(bnd)
    bnd.add_argument("--trials", type=int)
    bnd.add_argument("--epsilon", dest="bound_epsilon", type=float)

    plt = commands.add_parser("plot", help="render report CSVs as SVG/PNG line plots")
    _add_common(plt)
    plt.add_argument("reports", nargs="*", help="report CSV files")
    plt.add_argument("--no-preview", action="store_true", help="skip PNG previews")

    swp = commands.add_parser("sweep", help="attack once per parameter value")
    _add_common(swp)
    _add_data(swp)
    _add_attack(swp)
    swp.add_argument("--batch-size", type=int)
    swp.add_argument("--param", required=True, choices=list(SWEEP_PARAMS))
    swp.add_argument("--values", required=True, type=float, nargs="+")
    return parser


_CONFIG_FLAGS = [
    "output_dir", "seed", "jobs", "nodes", "steps", "window", "horizon", "resample", "hidden",
    "activation", "epochs", "learning_rate", "batch_size", "epsilon", "alpha", "iterations",
    "eta", "momentum", "mix_ratio", "seeds", "trials", "bound_epsilon",
]


def resolve_config(args: argparse.Namespace, settings: Optional[StadvSettings] = None) -> RunConfig:
    """Merge defaults, environment, config file and flags"""
    settings = settings or StadvSettings.from_env()
    flags = {name: getattr(args, name, None) for name in _CONFIG_FLAGS}
    return ConfigManager(args.config).resolve(settings, flags)


# ---------------------------------------------------------------------------
# Shared steps
# ---------------------------------------------------------------------------

class Workspace:
    """Output directory layout"""

    def __init__(self, root: str):
        self.root = Path(root)

    def dir(self, name: str) -> Path:
        path = self.root / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def checkpoints(self) -> Path:
        return self.dir("checkpoints")

    @property
    def reports(self) -> Path:
        return self.dir("reports")

    @property
    def plots(self) -> Path:
        return self.dir("plots")

    @property
    def logs(self) -> Path:
        return self.dir("logs")


def _data_dir(args: argparse.Namespace, cfg: RunConfig) -> Path:
    return Path(getattr(args, "data_dir", None) or Path(cfg.output_dir) / "data")


def load_dataset(data_dir: Path, cfg: RunConfig) -> Tuple[DatasetSplit, TrafficNetwork]:
    series = load_speed_csv(str(data_dir / SPEED_FILE))
    graph = load_graph_csv(str(data_dir / GRAPH_FILE), series.n)
    if cfg.resample > 1:
        series = resample(series, cfg.resample)
    return prepare_dataset(series, graph, cfg.window, cfg.horizon), graph


def _model_config(cfg: RunConfig, n: int, seed: int) -> ModelConfig:
    return ModelConfig(n=n, window=cfg.window, horizon=cfg.horizon, hidden=cfg.hidden,
                       activation=cfg.activation, seed=seed)


def _train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                       seed=seed, jobs=cfg.jobs)


def fit_model(cfg: RunConfig, split: DatasetSplit, graph: TrafficNetwork, seed: int) -> STModel:
    model = STModel.create(_model_config(cfg, graph.n, seed), graph)
    model, _ = train(model, split, _train_config(cfg, seed))
    return model


def attack_config(args: argparse.Namespace, cfg: RunConfig, n: int) -> AttackConfig:
    return AttackConfig(
        epsilon=cfg.epsilon,
        alpha=cfg.alpha,
        iterations=cfg.iterations,
        budget=budget_from_fraction(cfg.eta, n),
        selector=Selector.parse(args.selector),
        method=AttackMethod.parse(args.method),
        momentum=cfg.momentum,
        seed=cfg.seed,
        random_start=args.random_start,
        domain_clip=args.domain_clip,
    )


def _load_target(args: argparse.Namespace, ws: Workspace, split: DatasetSplit) -> STModel:
    path = Path(args.checkpoint) if args.checkpoint else ws.checkpoints / TARGET_CHECKPOINT
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path} (run `stadv train` first)")
    model, _ = load_checkpoint(str(path))
    if model.config.n != split.train[0].n or model.config.window != split.train[0].window:
        raise ConfigError(f"checkpoint {path} does not match the dataset dimensions")
    return model


def _surrogate(args: argparse.Namespace, cfg: RunConfig, split: DatasetSplit, graph: TrafficNetwork) -> STModel:
    """Black-box attackers train their own model on the observable history"""
    if args.surrogate:
        model, _ = load_checkpoint(args.surrogate)
        return model
    logger.info("Training surrogate model (seed %d)", cfg.seed + 1)
    return fit_model(cfg, split, graph, cfg.seed + 1)


def run_attack(
    args: argparse.Namespace,
    cfg: RunConfig,
    target: STModel,
    split: DatasetSplit,
    graph: TrafficNetwork,
    attack: AttackConfig,
    surrogate: Optional[STModel] = None,
):
    setting = AttackSetting.parse(args.setting)
    if setting is AttackSetting.BLACK and surrogate is None:
        surrogate = _surrogate(args, cfg, split, graph)
    clean, results = attack_split(setting, target, split, attack, graph, surrogate,
                                  batch_size=cfg.batch_size, jobs=cfg.jobs)
    return clean, results, evaluate_attack(target, clean, results, split.normalizer), surrogate


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> int:
    graph, series = generate_synthetic(cfg.nodes, cfg.steps, cfg.seed, cfg.window, cfg.horizon)
    out = _data_dir(args, cfg)
    save_speed_csv(series, str(out / SPEED_FILE))
    save_graph_csv(graph, str(out / GRAPH_FILE))
    print(f"Nodes: {graph.n}  Steps: {series.steps}  Edges: {len(graph.edges)}")
    print(f"Wrote {out / SPEED_FILE}")
    print(f"Wrote {out / GRAPH_FILE}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> int:
    split, graph = load_dataset(_data_dir(args, cfg), cfg)
    model = STModel.create(_model_config(cfg, graph.n, cfg.seed), graph)
    model, history = train(model, split, _train_config(cfg, cfg.seed))

    labels = stack_labels(split.test)
    test_mae = g_mae(split.normalizer.inverse(predict_batch(model, stack_inputs(split.test))), labels)
    persistence = np.stack([persistence_forecast(w)[..., 0] for w in split.test])
    baseline = g_mae(split.normalizer.inverse(persistence), labels)
    path = save_checkpoint(model, str(ws.checkpoints / f"{args.name}.stadv"),
                           extra={"normalizer": split.normalizer.to_dict(), "train_loss": history.losses[-1]})
    print(f"Final train loss: {history.losses[-1]:.6f}")
    print(f"Test G-MAE: {test_mae:.4f}  (persistence baseline {baseline:.4f})")
    print(f"Checkpoint: {path}")
    return EXIT_OK


def _write_json(data: dict, path: Path) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
    return path


def export_saliency(target: STModel, split: DatasetSplit, attack: AttackConfig, batch_size: int, path: str) -> Path:
    """TDNS scores of the first test batch against its true labels"""
    windows = split.test[:batch_size]
    labels = split.normalizer.transform(stack_labels(windows), clip=False)
    saliency = tdns_saliency(target, windows, labels, attack.epsilon, attack.alpha, attack.iterations,
                             attack.accumulate_saliency)
    return write_saliency_csv(saliency, path)


def cmd_attack(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> int:
    split, graph = load_dataset(_data_dir(args, cfg), cfg)
    target = _load_target(args, ws, split)
    attack = attack_config(args, cfg, graph.n)
    clean, results, report, _ = run_attack(args, cfg, target, split, graph, attack)

    name = f"{attack.label}-{args.setting}"
    rows = compare({attack.label: report})
    report_path = write_report_csv(rows, str(ws.reports / f"{name}.csv"))
    delta_path = write_perturbation_csv(results, str(ws.reports / f"{name}-perturbations.csv"))
    steps = horizon_breakdown(*predictions(target, clean, results, split.normalizer))
    horizon_path = write_horizon_csv(steps, str(ws.reports / f"{name}-horizon.csv"))
    summary_path = _write_json({
        "setting": args.setting,
        "label": attack.label,
        "config": attack.to_dict(),
        "report": report.to_dict(),
        "windows": [r.summary(attack) for r in results],
    }, ws.reports / f"{name}-summary.json")

    print(render_table(rows))
    print(f"Clean G-MAE: {report.clean_g_mae:.4f}")
    for step in steps:
        print(f"  step {step['step']:>3}: G-MAE {step['g_mae']:.4f}  L-MAE {step['l_mae']:.4f}")
    print(f"Report: {report_path}")
    print(f"Perturbations: {delta_path}")
    print(f"Horizon: {horizon_path}")
    print(f"Summary: {summary_path}")
    if args.saliency_csv:
        print(f"Saliency: {export_saliency(target, split, attack, cfg.batch_size, args.saliency_csv)}")
    return EXIT_OK


def _defend_once(args: argparse.Namespace, cfg: RunConfig, ws: Workspace, split: DatasetSplit,
                 graph: TrafficNetwork, strategy: DefenseStrategy, seed: int):
    """Robust training and attack evaluation for one seed"""
    run = cfg.merged({"seed": seed})
    evaluation = attack_config(args, run, graph.n)
    defense = DefenseConfig.for_strategy(strategy, evaluation, mix_ratio=cfg.mix_ratio,
                                         training=_train_config(cfg, seed))
    model = STModel.create(_model_config(cfg, graph.n, seed), graph)
    robust, history = defend(model, split, defense, graph)
    suffix = "" if seed == cfg.seed else f"-seed{seed}"
    path = save_checkpoint(robust, str(ws.checkpoints / f"{strategy.value.lower()}{suffix}.stadv"),
                           defense=strategy.value,
                           extra={"normalizer": split.normalizer.to_dict(), "inner_attack": defense.inner_attack.to_dict()})
    _, _, report, _ = run_attack(args, run, robust, split, graph, evaluation)
    logger.info("seed %d: final train loss %.6f, attacked G-MAE %.4f", seed, history.losses[-1], report.g_mae)
    return f"{strategy.value}/{evaluation.label}", report, path


def cmd_defend(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> int:
    split, graph = load_dataset(_data_dir(args, cfg), cfg)
    strategy = DefenseStrategy.parse(args.strategy)
    seeds = [cfg.seed + k for k in range(cfg.seeds)]
    runs = [_defend_once(args, cfg, ws, split, graph, strategy, seed) for seed in seeds]
    label = runs[0][0]
    reports = [report for _, report, _ in runs]

    rows = [(f"{label}@seed={seed}", report) for seed, report in zip(seeds, reports)]
    rows.append((label, mean_report(reports)))
    name = f"defense-{strategy.value.lower()}"
    report_path = write_report_csv(rows, str(ws.reports / f"{name}.csv"))
    spread = aggregate_seeds(reports)
    seeds_path = _write_json({
        "label": label,
        "seeds": seeds,
        "runs": [report.to_dict() for report in reports],
        "mean": {metric: mean for metric, (mean, _) in spread.items()},
        "std": {metric: std for metric, (_, std) in spread.items()},
    }, ws.reports / f"{name}-seeds.json")

    print(render_table(rows))
    print(f"Seeds: {', '.join(str(s) for s in seeds)}")
    for metric, (mean, std) in spread.items():
        print(f"  {metric:16s} {mean:.4f} +/- {std:.4f}")
    for _, _, path in runs:
        print(f"Checkpoint: {path}")
    print(f"Report: {report_path}")
    print(f"Seed summary: {seeds_path}")
    return EXIT_OK


def cmd_verify_bound(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> int:
    if cfg.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {cfg.trials}")
    report = verify_random_suite(cfg.trials, cfg.seed, epsilon=cfg.bound_epsilon, jobs=cfg.jobs)
    path = _write_json(report.to_dict(), ws.reports / "bound.json")
    worst = report.worst
    print(f"Trials: {report.trials}")
    print(f"Bound (worst trial): {worst.bound_value:.6g}")
    print(f"Max gap/bound ratio: {report.max_ratio:.6g}")
    print("Result: PASS")
    print(f"Report: {path}")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> int:
    if not args.reports:
        raise UsageError("plot needs at least one report CSV")
    written = plot_reports(args.reports, str(ws.plots), preview=not args.no_preview)
    for path in written:
        print(f"Wrote {path}")
    return EXIT_OK


def _sweep_point(param: str, value: float, cfg: RunConfig) -> RunConfig:
    if param == "eta":
        return cfg.merged({"eta": value})
    if param == "epsilon":
        return cfg.merged({"epsilon": value})
    if value != int(value) or value < 1:
        raise UsageError(f"batch size must be a positive integer, got {value}")
    return cfg.merged({"batch_size": int(value)})


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> int:
    split, graph = load_dataset(_data_dir(args, cfg), cfg)
    target = _load_target(args, ws, split)
    reports = {}
    surrogate = None
    for value in args.values:
        point = _sweep_point(args.param, value, cfg)
        attack = attack_config(args, point, graph.n)
        _, _, report, surrogate = run_attack(args, point, target, split, graph, attack, surrogate)
        reports[f"{attack.label}@{args.param}={value:g}"] = report
        logger.info("sweep %s=%g: G-MAE %.4f", args.param, value, report.g_mae)
    rows = sorted(reports.items(), key=lambda item: float(item[0].rsplit("=", 1)[1]))
    path = write_report_csv(rows, str(ws.reports / f"sweep-{args.param}.csv"))
    print(render_table(rows))
    print(f"Report: {path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "verify-bound": cmd_verify_bound,
    "plot": cmd_plot,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _configure_logging(level: str, log_file: Path) -> logging.Handler:
    logging.basicConfig(format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    root = logging.getLogger()
    root.setLevel(level)
    handler = logging.FileHandler(log_file, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    return handler


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit code"""
    handler = None
    try:
        args = build_parser().parse_args(argv)
        settings = StadvSettings.from_env()
        cfg = resolve_config(args, settings)
        ws = Workspace(cfg.output_dir)
        handler = _configure_logging(args.log_level or settings.log_level, ws.logs / f"{args.command}.log")
        ConfigManager.save(cfg, cfg.output_dir)

        _banner(f"stadv {args.command}")
        code = COMMANDS[args.command](args, cfg, ws)
        print("=" * 50)
        return code
    except BoundViolationError as e:
        logger.error("%s", e)
        print(f"Result: FAIL ({e})", file=sys.stderr)
        return EXIT_VIOLATION
    except ConfigError as e:
        print(f"Usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (StadvError, OSError) as e:
        logger.error("%s", e)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
