"""
Traffic Data
Loading, generation, normalization, windowing and splitting of sensor speed series
"""

import io
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from stadv.errors import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_SAMPLING_MINUTES = 5.0
DIURNAL_PERIOD_STEPS = 288  # one day of 5-minute ticks
TRAIN_FRACTION = 0.7
VALIDATION_FRACTION = 0.1


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TrafficNetwork:
    """Undirected sensor graph with weights in [0, 1]"""
    n: int
    edges: Tuple[Tuple[int, int, float], ...]  # one entry per undirected edge, from < to
    adjacency: np.ndarray = field(repr=False, compare=False)
    degrees: Tuple[int, ...] = field(repr=False)
    max_degree: int = 0

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Tuple[int, int, float]]) -> "TrafficNetwork":
        """Build a symmetric network; self-loops are dropped and repeated pairs keep the last weight"""
        if n < 1:
            raise ConfigError("network needs at least one node")
        weights: Dict[Tuple[int, int], float] = {}
        for source, target, weight in edges:
            if not (0 <= source < n and 0 <= target < n):
                raise DataError(f"node id out of range for n={n}: ({source}, {target})")
            if not 0.0 <= weight <= 1.0:
                raise DataError(f"edge weight {weight} outside [0, 1]")
            if source == target:
                continue
            weights[(min(source, target), max(source, target))] = float(weight)

        adjacency = np.zeros((n, n))
        for (i, j), weight in weights.items():
            adjacency[i, j] = weight
            adjacency[j, i] = weight
        degrees = tuple(int(np.count_nonzero(adjacency[i] > 0.0)) for i in range(n))
        ordered = tuple((i, j, w) for (i, j), w in sorted(weights.items()))
        return cls(
            n=n,
            edges=ordered,
            adjacency=_frozen(adjacency),
            degrees=degrees,
            max_degree=max(degrees) if degrees else 0,
        )

    def neighbors(self, node: int) -> List[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[node] > 0.0)]


@dataclass(frozen=True, eq=False)
class SpeedSeries:
    """Dense steps x n speed matrix in raw units"""
    values: np.ndarray = field(repr=False)
    sampling_interval: float = DEFAULT_SAMPLING_MINUTES
    node_ids: Tuple[str, ...] = ()

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MinMaxNormalizer:
    """Affine map of raw speeds onto [0, 1]"""
    minimum: float
    maximum: float

    @property
    def scale(self) -> float:
        return self.maximum - self.minimum

    def transform(self, values: np.ndarray, clip: bool = True) -> np.ndarray:
        scaled = (np.asarray(values, dtype=np.float64) - self.minimum) / self.scale
        return np.clip(scaled, 0.0, 1.0) if clip else scaled

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.scale + self.minimum

    def to_dict(self) -> Dict[str, float]:
        return {"minimum": self.minimum, "maximum": self.maximum}


@dataclass(frozen=True, eq=False)
class StateWindow:
    """T input steps (normalized) and the following horizon labels (raw units)"""
    inputs: np.ndarray = field(repr=False)   # (T, n, c)
    labels: np.ndarray = field(repr=False)   # (tau, n)
    anchor: int = 0

    @property
    def window(self) -> int:
        return self.inputs.shape[0]

    @property
    def horizon(self) -> int:
        return self.labels.shape[0]

    @property
    def n(self) -> int:
        return self.inputs.shape[1]

    @classmethod
    def create(cls, inputs: np.ndarray, labels: np.ndarray, anchor: int) -> "StateWindow":
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim == 2:
            inputs = inputs[:, :, None]
        if inputs.ndim != 3 or labels.ndim != 2 or labels.shape[1] != inputs.shape[1]:
            raise ShapeError("StateWindow", inputs.shape, np.shape(labels))
        return cls(inputs=_frozen(inputs), labels=_frozen(labels), anchor=int(anchor))


@dataclass
class DatasetSplit:
    """Chronological train/validation/test partition of a window sequence"""
    train: List[StateWindow]
    validation: List[StateWindow]
    test: List[StateWindow]
    normalizer: Optional[MinMaxNormalizer] = None
    _by_anchor: Dict[int, StateWindow] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._by_anchor:
            self._by_anchor = {w.anchor: w for w in self.windows}

    @property
    def windows(self) -> List[StateWindow]:
        return self.train + self.validation + self.test

    def previous(self, window: StateWindow) -> Optional[StateWindow]:
        """The window whose anchor is exactly T steps earlier, if any"""
        return self._by_anchor.get(window.anchor - window.window)

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _parse_float(text: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"not a number: '{text}'", row=row) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value '{text}'", row=row)
    return value


def read_cells(path: Path) -> pd.DataFrame:
    """
    Raw string cells of a header-less comma file

    Blank lines are skipped; a line of empty cells is kept. The index holds
    the 1-based file line of each row and missing trailing fields are NaN.
    """
    raw = path.read_text(encoding="utf-8")
    lines = [number for number, text in enumerate(raw.splitlines(), start=1) if text.strip()]
    try:
        frame = pd.read_csv(io.StringIO(raw), header=None, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return pd.DataFrame()
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise DataError(f"{path}: {e}", row=int(match.group(1)) if match else None) from None
    if len(lines) == len(frame):
        frame.index = lines
    else:
        frame.index = frame.index + 1
    return frame


def _first_line(flags: pd.DataFrame) -> int:
    return int(flags.any(axis=1).idxmax())


def load_speed_csv(path: str) -> SpeedSeries:
    """
    Load a speed export: a header of node identifiers then one row per time step

    Empty cells are filled with the last observation in the same column;
    leading gaps take the first later observation. A row of empty cells is a
    time step with every sensor missing.

    Args:
        path: CSV file path

    Returns:
        Dense SpeedSeries
    """
    path = Path(path)
    cells = read_cells(path)
    if cells.empty:
        raise DataError(f"{path}: empty file")
    header = tuple(str(cell).strip() for cell in cells.iloc[0])
    n = len(header)
    body = cells.iloc[1:]
    if body.empty:
        raise DataError(f"{path}: no time steps after the header")

    short = body.isna()
    if short.any(axis=None):
        line = _first_line(short)
        raise DataError(f"expected {n} columns, found {int(body.loc[line].notna().sum())}", row=line)

    text = body.apply(lambda column: column.str.strip())
    present = text != ""
    bad = present & text.apply(pd.to_numeric, errors="coerce").isna()
    if bad.any(axis=None):
        line = _first_line(bad)
        raise DataError(f"not a number: '{text.loc[line][bad.loc[line]].iloc[0]}'", row=line)
    numbers = text.where(present).astype(np.float64)
    infinite = present & ~np.isfinite(numbers)
    if infinite.any(axis=None):
        raise DataError("non-finite value", row=_first_line(infinite))
    negative = numbers < 0.0
    if negative.any(axis=None):
        line = _first_line(negative)
        raise DataError(f"negative speed {numbers.loc[line][negative.loc[line]].iloc[0]}", row=line)

    numbers.columns = range(n)
    empty = numbers.isna().all()
    if empty.any():
        raise DataError(f"{path}: column '{header[int(empty.idxmax())]}' has no observations")
    filled = int(numbers.isna().sum().sum())
    if filled:
        logger.info("Filled %d missing cells in %s", filled, path)
    values = numbers.ffill().bfill().to_numpy(dtype=np.float64)
    return SpeedSeries(values=_frozen(values), node_ids=header)


def load_graph_csv(path: str, n: int) -> TrafficNetwork:
    """Load `from,to,weight` rows with zero-based node ids"""
    path = Path(path)
    cells = read_cells(path)
    edges = []
    if not cells.empty and cells.shape[1] != 3:
        raise DataError(f"expected from,to,weight but found {cells.shape[1]} fields", row=int(cells.index[0]))
    for line, row in cells.iterrows():
        if row.isna().any():
            raise DataError(f"expected from,to,weight but found {int(row.notna().sum())} fields", row=line)
        fields = [str(cell).strip() for cell in row]
        if not any(fields):
            continue
        try:
            source, target = int(fields[0]), int(fields[1])
        except ValueError:
            if line == cells.index[0]:
                continue  # header
            raise DataError(f"node ids must be integers: {fields[:2]}", row=line) from None
        weight = _parse_float(fields[2], line)
        if not (0 <= source < n and 0 <= target < n):
            raise DataError(f"node id out of range for n={n}: ({source}, {target})", row=line)
        if not 0.0 <= weight <= 1.0:
            raise DataError(f"edge weight {weight} outside [0, 1]", row=line)
        edges.append((source, target, weight))
    network = TrafficNetwork.from_edges(n, edges)
    logger.info("Loaded graph with %d nodes, %d edges, max degree %d", n, len(network.edges), network.max_degree)
    return network


def save_speed_csv(series: SpeedSeries, path: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = series.node_ids or tuple(str(i) for i in range(series.n))
    pd.DataFrame(series.values, columns=list(ids)).to_csv(path, index=False, lineterminator="\n")


def save_graph_csv(network: TrafficNetwork, path: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(network.edges), columns=["from", "to", "weight"])
    frame.to_csv(path, index=False, header=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def generate_synthetic(
    n: int,
    steps: int,
    seed: int,
    window: int = 12,
    horizon: int = 12,
) -> Tuple[TrafficNetwork, SpeedSeries]:
    """
    Random geometric sensor graph with diurnal speed profiles

    Nodes sit on the unit square and connect within radius 1.5/sqrt(n).
    Each tick starts from 60 + 15*sin(diurnal phase), is averaged once over
    the node's neighborhood, then gets N(0, 2^2) noise and is floored at 0.

    Args:
        n: Node count (>= 2)
        steps: Time steps (>= window + horizon)
        seed: Generator seed; output is a pure function of (n, steps, seed)

    Returns:
        (network, series)
    """
    if n < 2:
        raise DataError(f"synthetic graph needs n >= 2, got {n}")
    if steps < window + horizon:
        raise DataError(f"synthetic series needs at least {window + horizon} steps, got {steps}")

    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, 1.0, size=(n, 2))
    radius = 1.5 / math.sqrt(n)
    distance = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)

    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if distance[i, j] <= radius:
                edges.append((i, j, float(np.exp(-((distance[i, j] / radius) ** 2)))))
    network = TrafficNetwork.from_edges(n, edges)

    # nearby sensors peak at similar times of day
    phase = math.pi * positions.sum(axis=1) + rng.uniform(-0.1, 0.1, size=n)
    ticks = np.arange(steps)[:, None]
    base = 60.0 + 15.0 * np.sin(2.0 * math.pi * ticks / DIURNAL_PERIOD_STEPS + phase[None, :])

    mixing = network.adjacency + np.eye(n)
    mixing = mixing / mixing.sum(axis=1, keepdims=True)
    smoothed = base @ mixing.T
    speeds = np.maximum(smoothed + rng.normal(0.0, 2.0, size=(steps, n)), 0.0)

    logger.debug("Generated synthetic data n=%d steps=%d seed=%d edges=%d", n, steps, seed, len(edges))
    return network, SpeedSeries(values=_frozen(speeds), node_ids=tuple(str(i) for i in range(n)))


def resample(series: SpeedSeries, factor: int) -> SpeedSeries:
    """Average consecutive blocks of `factor` steps; a trailing partial block is dropped"""
    if factor < 1:
        raise ConfigError(f"resample factor must be >= 1, got {factor}")
    if factor == 1:
        return series
    blocks = series.steps // factor
    if blocks < 1:
        raise DataError(f"cannot resample {series.steps} steps by {factor}")
    values = series.values[: blocks * factor].reshape(blocks, factor, series.n).mean(axis=1)
    return SpeedSeries(
        values=_frozen(values),
        sampling_interval=series.sampling_interval * factor,
        node_ids=series.node_ids,
    )


# ---------------------------------------------------------------------------
# Normalization, windows and splits
# ---------------------------------------------------------------------------

def fit_normalizer(series: SpeedSeries, train_fraction: float = TRAIN_FRACTION) -> MinMaxNormalizer:
    if series.steps == 0 or series.n == 0:
        raise DataError("cannot normalize an empty series")
    train_steps = max(1, int(math.floor(train_fraction * series.steps)))
    portion = series.values[:train_steps]
    minimum, maximum = float(portion.min()), float(portion.max())
    if maximum <= minimum:
        raise DataError(f"constant series (min == max == {minimum}) cannot be normalized")
    return MinMaxNormalizer(minimum, maximum)


def normalize(series: SpeedSeries) -> Tuple[SpeedSeries, MinMaxNormalizer]:
    """Min-max scale using the train-portion range, clamped to [0, 1]"""
    normalizer = fit_normalizer(series)
    scaled = SpeedSeries(
        values=_frozen(normalizer.transform(series.values)),
        sampling_interval=series.sampling_interval,
        node_ids=series.node_ids,
    )
    return scaled, normalizer


def make_windows(
    series: SpeedSeries,
    graph: TrafficNetwork,
    window: int,
    horizon: int,
    normalizer: Optional[MinMaxNormalizer] = None,
) -> List[StateWindow]:
    """
    Stride-1 sliding windows over a raw series

    Args:
        series: Raw speeds
        graph: Network the series was recorded on
        window: Input length T
        horizon: Output length tau
        normalizer: Scaling for inputs; fitted on the train portion when omitted

    Returns:
        steps - T - tau + 1 windows; the first one is anchored at step T - 1
    """
    if graph.n != series.n:
        raise ShapeError("make_windows", (series.n,), (graph.n,), "series and graph node counts differ")
    if window < 1 or horizon < 1:
        raise ConfigError("window and horizon must be >= 1")
    count = series.steps - window - horizon + 1
    if count < 1:
        raise DataError(f"{series.steps} steps are too short for T={window}, tau={horizon}")
    if normalizer is None:
        normalizer = fit_normalizer(series)

    scaled = normalizer.transform(series.values)
    windows = []
    for start in range(count):
        anchor = start + window - 1
        windows.append(StateWindow.create(
            scaled[start:anchor + 1],
            series.values[anchor + 1:anchor + 1 + horizon],
            anchor,
        ))
    return windows


def chronological_split(
    windows: Sequence[StateWindow],
    normalizer: Optional[MinMaxNormalizer] = None,
) -> DatasetSplit:
    """70/10/20 split by anchor order (train and validation sizes are floored)"""
    m = len(windows)
    if m < 10:
        raise DataError(f"need at least 10 windows to split, got {m}")
    ordered = sorted(windows, key=lambda w: w.anchor)
    n_train = int(math.floor(TRAIN_FRACTION * m))
    n_val = int(math.floor(VALIDATION_FRACTION * m))
    return DatasetSplit(
        train=list(ordered[:n_train]),
        validation=list(ordered[n_train:n_train + n_val]),
        test=list(ordered[n_train + n_val:]),
        normalizer=normalizer,
    )


def batch(windows: Sequence[StateWindow], size: int) -> List[List[StateWindow]]:
    """Contiguous batches of `size`; the last one may be smaller"""
    if size < 1:
        raise ConfigError(f"batch size must be >= 1, got {size}")
    return [list(windows[i:i + size]) for i in range(0, len(windows), size)]


def stack_inputs(windows: Sequence[StateWindow]) -> np.ndarray:
    """(B, T, n, c) input block"""
    return np.stack([w.inputs for w in windows])


def stack_labels(windows: Sequence[StateWindow]) -> np.ndarray:
    """(B, tau, n) label block"""
    return np.stack([w.labels for w in windows])


def prepare_dataset(
    series: SpeedSeries,
    graph: TrafficNetwork,
    window: int,
    horizon: int,
) -> DatasetSplit:
    """Normalize, window and split in one step"""
    normalizer = fit_normalizer(series)
    windows = make_windows(series, graph, window, horizon, normalizer)
    split = chronological_split(windows, normalizer)
    logger.info("Dataset: %d windows -> train/val/test %s", len(windows), split.sizes())
    return split
