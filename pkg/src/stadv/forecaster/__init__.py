"""
Forecaster
Causal temporal convolution, graph-convolution stack and linear horizon head,
with its training loop, the current-state estimator and surrogate labels
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from stadv.autodiff import ComputationTape, Tensor, Var, backward, concat, reduce_gradients
from stadv.data import DatasetSplit, MinMaxNormalizer, StateWindow, TrafficNetwork, stack_inputs, stack_labels
from stadv.errors import ConfigError, NumericalError, ShapeError, TrainingDivergedError
from stadv.workers import parallel_map

logger = logging.getLogger(__name__)


class Activation(Enum):
    """Layer nonlinearity; all three are 1-Lipschitz"""
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"

    @property
    def lipschitz(self) -> float:
        return 1.0

    def apply(self, x: Var) -> Var:
        if self is Activation.RELU:
            return x.relu()
        if self is Activation.TANH:
            return x.tanh()
        return x.sigmoid()

    def numpy(self, x: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(x, 0.0)
        if self is Activation.TANH:
            return np.tanh(x)
        return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of an STModel"""
    n: int
    window: int = 12
    horizon: int = 12
    features: int = 1
    hidden: int = 16
    conv_layers: int = 2
    kernel: int = 3
    graph_layers: int = 2
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.window < 1 or self.horizon < 1 or self.features < 1 or self.hidden < 1:
            raise ConfigError(f"invalid model dimensions: {self.to_dict()}")
        if self.conv_layers < 0 or self.graph_layers < 0 or self.kernel < 1:
            raise ConfigError(f"invalid layer counts: {self.to_dict()}")
        Activation(self.activation)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


def normalized_aggregation(adjacency: np.ndarray) -> np.ndarray:
    """Row-normalized adjacency with self-loops, D^-1 (A + I)"""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    with_loops = adjacency + np.eye(adjacency.shape[0])
    return with_loops / with_loops.sum(axis=1, keepdims=True)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass(frozen=True, eq=False)
class STModel:
    """Spatiotemporal forecaster; parameters are never mutated in place"""
    config: ModelConfig
    aggregation: np.ndarray = field(repr=False)
    params: Dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def create(cls, config: ModelConfig, network: TrafficNetwork) -> "STModel":
        if network.n != config.n:
            raise ShapeError("STModel", (config.n,), (network.n,), "model and network node counts differ")
        rng = np.random.default_rng(config.seed)
        params: Dict[str, np.ndarray] = {}
        width = config.features
        for layer in range(config.conv_layers):
            for tap in range(config.kernel):
                params[f"temporal.{layer}.w{tap}"] = _xavier(rng, width, config.hidden)
            params[f"temporal.{layer}.b"] = np.zeros(config.hidden)
            width = config.hidden
        # starts as a plain mean over the T steps
        params["temporal.readout"] = np.full((config.window, 1, 1), 1.0 / config.window)
        for layer in range(config.graph_layers):
            params[f"graph.{layer}.w"] = _xavier(rng, width, config.hidden)
            width = config.hidden
        params["head.w"] = _xavier(rng, width, config.horizon)
        params["head.b"] = np.zeros(config.horizon)
        return cls(config=config, aggregation=normalized_aggregation(network.adjacency), params=params)

    @property
    def activation(self) -> Activation:
        return Activation(self.config.activation)

    @property
    def embedding_width(self) -> int:
        return self.config.hidden if self.config.conv_layers > 0 else self.config.features

    def with_params(self, params: Mapping[str, np.ndarray]) -> "STModel":
        merged = dict(self.params)
        for name, value in params.items():
            if name not in merged:
                raise ConfigError(f"unknown parameter '{name}'")
            if np.shape(value) != merged[name].shape:
                raise ShapeError(name, merged[name].shape, np.shape(value))
            merged[name] = np.array(value, dtype=np.float64)
        return replace(self, params=merged)

    def with_aggregation(self, aggregation: np.ndarray) -> "STModel":
        return replace(self, aggregation=np.array(aggregation, dtype=np.float64))

    def graph_weights(self) -> List[np.ndarray]:
        return [self.params[f"graph.{k}.w"] for k in range(self.config.graph_layers)]

    def check_inputs(self, shape: Tuple[int, ...]) -> None:
        expected = (self.config.window, self.config.n, self.config.features)
        if len(shape) != 4 or tuple(shape[1:]) != expected:
            raise ShapeError("predict", shape, (-1,) + expected, "inputs must be (batch, T, n, c)")

    def _encode(self, tape: ComputationTape, x: Var, weights: Mapping[str, Var]) -> Var:
        """Causal temporal convolution then a learned weighting over time, (B, n, width)"""
        cfg = self.config
        act = self.activation
        h = x
        for layer in range(cfg.conv_layers):
            batch, steps, n, width = h.shape
            padded = h
            if cfg.kernel > 1:
                zeros = tape.constant(np.zeros((batch, cfg.kernel - 1, n, width)))
                padded = concat([zeros, h], axis=1)
            out = weights[f"temporal.{layer}.b"]
            for tap in range(cfg.kernel):
                start = cfg.kernel - 1 - tap
                out = padded.slice(1, start, start + steps) @ weights[f"temporal.{layer}.w{tap}"] + out
            h = act.apply(out)
        return (h * weights["temporal.readout"]).sum(axis=1)

    def record(self, tape: ComputationTape, x: Var, trainable: bool = False) -> Var:
        """
        Record the forward pass on a tape

        Args:
            tape: Tape to record on
            x: (B, T, n, c) inputs
            trainable: Record parameters as gradient leaves

        Returns:
            (B, tau, n) forecast
        """
        weights = {
            name: tape.leaf(name, value) if trainable else tape.constant(value)
            for name, value in self.params.items()
        }
        z = self._encode(tape, x, weights)
        aggregation = tape.constant(self.aggregation)
        for layer in range(self.config.graph_layers):
            z = self.activation.apply(aggregation @ z @ weights[f"graph.{layer}.w"])

        forecast = z @ weights["head.w"] + weights["head.b"]  # (B, n, tau)
        return forecast.transpose((0, 2, 1))

    def embeddings(self, inputs: np.ndarray) -> List[np.ndarray]:
        """Graph-layer embeddings Z^(0..L) of a (B, T, n, c) block"""
        self.check_inputs(np.shape(inputs))
        tape = ComputationTape()
        weights = {name: tape.constant(value) for name, value in self.params.items()}
        z = self._encode(tape, tape.constant(inputs), weights).value.numpy()
        layers = [z]
        for w in self.graph_weights():
            z = self.activation.numpy(self.aggregation @ z @ w)
            layers.append(z)
        return layers


# ---------------------------------------------------------------------------
# Prediction and losses
# ---------------------------------------------------------------------------

def predict_batch(model: STModel, inputs: np.ndarray) -> np.ndarray:
    """(B, T, n, c) normalized inputs -> (B, tau, n) normalized forecasts"""
    inputs = np.asarray(inputs, dtype=np.float64)
    model.check_inputs(inputs.shape)
    tape = ComputationTape()
    out = model.record(tape, tape.constant(inputs))
    return out.value.numpy()


def predict(model: STModel, window: StateWindow) -> np.ndarray:
    """Forecast for one window as a (tau, n, 1) array of normalized speeds"""
    return predict_batch(model, window.inputs[None])[0][:, :, None]


def persistence_forecast(window: StateWindow) -> np.ndarray:
    """Repeat the last observed speed over the horizon, (tau, n, 1) normalized"""
    last = window.inputs[-1, :, 0]
    return np.repeat(last[None, :, None], window.horizon, axis=0)


def per_sample_mae(forecast: Var, targets: np.ndarray) -> Var:
    """Sum over the batch of each sample's mean absolute error"""
    return (forecast - targets).abs().mean(axis=(1, 2)).sum()


def loss_and_input_gradient(
    model: STModel,
    inputs: np.ndarray,
    targets: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-sample MAE and its gradient with respect to the inputs

    Args:
        model: Forecaster, held fixed
        inputs: (B, T, n, c) normalized inputs
        targets: (B, tau, n) normalized targets

    Returns:
        (losses of shape (B,), gradient of shape (B, T, n, c)); row b of the
        gradient is the gradient of sample b's own loss
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    model.check_inputs(inputs.shape)
    tape = ComputationTape()
    x = tape.leaf("inputs", inputs)
    forecast = model.record(tape, x)
    errors = (forecast - np.asarray(targets, dtype=np.float64)).abs().mean(axis=(1, 2))
    loss = errors.sum()
    grads = backward(tape, loss)
    return errors.value.numpy(), grads["inputs"].numpy()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Gradient-descent settings"""
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 64
    seed: int = 0
    loss: str = "mae"
    shard_size: int = 16
    jobs: Optional[int] = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.shard_size < 1:
            raise ConfigError("batch size and shard size must be >= 1")
        if self.loss != "mae":
            raise ConfigError(f"unsupported loss '{self.loss}'")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainHistory:
    """Per-epoch training record"""
    losses: List[float] = field(default_factory=list)
    smoothed: List[float] = field(default_factory=list)  # running minimum of losses
    validation: List[float] = field(default_factory=list)

    def record(self, loss: float, validation: Optional[float] = None) -> None:
        self.losses.append(loss)
        self.smoothed.append(min(loss, self.smoothed[-1]) if self.smoothed else loss)
        if validation is not None:
            self.validation.append(validation)


def _target_block(windows: Sequence[StateWindow], normalizer: Optional[MinMaxNormalizer]) -> np.ndarray:
    labels = stack_labels(windows)
    if normalizer is None:
        return labels
    return normalizer.transform(labels, clip=False)


def _shard_gradient(model: STModel, inputs: np.ndarray, targets: np.ndarray, total: int) -> Tuple[float, Dict[str, Tensor]]:
    tape = ComputationTape()
    forecast = model.record(tape, tape.constant(inputs), trainable=True)
    loss = per_sample_mae(forecast, targets) * (1.0 / total)
    return loss.value.item(), backward(tape, loss)


def mean_abs_error(model: STModel, windows: Sequence[StateWindow], normalizer: Optional[MinMaxNormalizer]) -> float:
    """Mean absolute error in normalized units over a window collection"""
    if not windows:
        return float("nan")
    forecast = predict_batch(model, stack_inputs(windows))
    return float(np.mean(np.abs(forecast - _target_block(windows, normalizer))))


BatchHook = Callable[[STModel, List[StateWindow], int], np.ndarray]


def train(
    model: STModel,
    split: DatasetSplit,
    cfg: TrainConfig,
    perturb: Optional[BatchHook] = None,
) -> Tuple[STModel, TrainHistory]:
    """
    Fit the forecaster with fixed-step minibatch gradient descent on MAE

    Batches are shuffled with the config seed and split into shards of
    cfg.shard_size samples whose gradients are summed in shard order, so the
    result does not depend on cfg.jobs.

    Args:
        model: Initial model (left untouched)
        split: Dataset; only split.train is fitted, split.validation is reported
        cfg: Training settings
        perturb: Optional hook (current model, batch windows, step index) returning
            the (B, T, n, c) inputs to fit instead of the clean ones

    Returns:
        (trained model, loss history)
    """
    if not split.train:
        raise ConfigError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    params = {name: value.copy() for name, value in model.params.items()}
    current = model.with_params(params)
    history = TrainHistory()
    inputs_all = stack_inputs(split.train)
    targets_all = _target_block(split.train, split.normalizer)
    count = len(split.train)

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(count)
        epoch_loss = 0.0
        for start in range(0, count, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            inputs = inputs_all[idx]
            if perturb is not None:
                inputs = perturb(current, [split.train[i] for i in idx], step)
            targets = targets_all[idx]
            step += 1
            shards = [slice(s, s + cfg.shard_size) for s in range(0, len(idx), cfg.shard_size)]
            try:
                parts = parallel_map(
                    lambda shard: _shard_gradient(current, inputs[shard], targets[shard], len(idx)),
                    shards,
                    cfg.jobs,
                )
            except NumericalError:
                raise TrainingDivergedError(epoch, float("nan")) from None
            batch_loss = sum(loss for loss, _ in parts)
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, batch_loss)
            grads = reduce_gradients(g for _, g in parts)
            for name, grad in grads.items():
                params[name] = params[name] - cfg.learning_rate * grad.data
                if not np.all(np.isfinite(params[name])):
                    raise TrainingDivergedError(epoch, batch_loss)
            current = model.with_params(params)
            epoch_loss += batch_loss * len(idx)

        epoch_loss /= count
        validation = mean_abs_error(current, split.validation, split.normalizer) if split.validation else None
        history.record(epoch_loss, validation)
        logger.info(
            "epoch %d/%d loss=%.6f smoothed=%.6f%s",
            epoch, cfg.epochs, epoch_loss, history.smoothed[-1],
            f" val={validation:.6f}" if validation is not None else "",
        )
    return current, history


# ---------------------------------------------------------------------------
# State estimation and surrogate labels
# ---------------------------------------------------------------------------

def estimate_current_state(
    estimator: STModel,
    previous: StateWindow,
    normalizer: Optional[MinMaxNormalizer] = None,
    rolling: bool = True,
) -> StateWindow:
    """
    Predict the T steps following `previous` and package them as a window

    When the estimator's horizon is shorter than T, predictions are fed back
    as inputs until T steps exist. Extra feature channels carry the last
    observed values forward. Estimated inputs are clamped to [0, 1].

    Args:
        estimator: Pre-trained forecaster
        previous: Window ending T steps before the one being estimated
        normalizer: Used to express the placeholder labels in raw units
        rolling: Allow rolling prediction when tau < T

    Returns:
        Estimated window anchored T steps after `previous`
    """
    cfg = estimator.config
    steps = previous.window
    if cfg.horizon < steps and not rolling:
        raise ConfigError(f"estimator horizon {cfg.horizon} is shorter than T={steps} and rolling is disabled")

    history = np.array(previous.inputs)
    produced: List[np.ndarray] = []
    total = 0
    while total < steps:
        forecast = predict_batch(estimator, history[None])[0]  # (tau, n)
        block = np.repeat(history[-1:], forecast.shape[0], axis=0)
        block[:, :, 0] = forecast
        block = np.clip(block, 0.0, 1.0)
        produced.append(block)
        total += forecast.shape[0]
        history = np.concatenate([history, block], axis=0)[-steps:]
    estimated = np.concatenate(produced, axis=0)[:steps]

    placeholder = predict_batch(estimator, estimated[None])[0]
    if normalizer is not None:
        placeholder = normalizer.inverse(placeholder)
    return StateWindow.create(estimated, placeholder, previous.anchor + steps)


def surrogate_label(
    generator: STModel,
    window: StateWindow,
    epsilon: float,
    seed: int,
) -> np.ndarray:
    """
    Prediction plus uniform noise in [-epsilon/10, epsilon/10]

    Returns:
        (tau, n, 1) normalized surrogate labels
    """
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    prediction = predict(generator, window)
    if epsilon == 0:
        return prediction
    rng = np.random.default_rng(seed)
    return prediction + rng.uniform(-epsilon / 10.0, epsilon / 10.0, size=prediction.shape)
