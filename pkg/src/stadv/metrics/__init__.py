"""
Evaluation Metrics
Global and local error of attacked forecasts, degradation and comparison tables
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from stadv.errors import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["method", "g_mae", "l_mae", "g_rmse", "l_rmse", "degradation_pct"]
METRIC_NAMES = ["g_mae", "l_mae", "g_rmse", "l_rmse"]
HORIZON_COLUMNS = ["step", "g_mae", "l_mae"]


def _residual(left: np.ndarray, right: np.ndarray, name: str) -> np.ndarray:
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape:
        raise ShapeError(name, left.shape, right.shape)
    if left.size == 0:
        raise ShapeError(name, left.shape, right.shape, "no entries")
    return left - right


def g_mae(attacked: np.ndarray, labels: np.ndarray) -> float:
    """Mean absolute error of attacked predictions against ground truth"""
    return float(np.mean(np.abs(_residual(attacked, labels, "g_mae"))))


def l_mae(attacked: np.ndarray, clean: np.ndarray) -> float:
    """Mean absolute change between attacked and clean predictions"""
    return float(np.mean(np.abs(_residual(attacked, clean, "l_mae"))))


def g_rmse(attacked: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sqrt(np.mean(_residual(attacked, labels, "g_rmse") ** 2)))


def l_rmse(attacked: np.ndarray, clean: np.ndarray) -> float:
    return float(np.sqrt(np.mean(_residual(attacked, clean, "l_rmse") ** 2)))


def degradation_pct(clean: float, attacked: float) -> float:
    """Relative performance loss 100 * (1 - clean / attacked)"""
    if not attacked > 0:
        raise ConfigError(f"attacked metric must be > 0, got {attacked}")
    return 100.0 * (1.0 - clean / attacked)


@dataclass
class MetricsReport:
    """Attack-effect metrics in raw speed units"""
    g_mae: float
    l_mae: float
    g_rmse: float
    l_rmse: float
    sample_count: int = 0
    node_count: int = 0
    degradation_pct: Optional[float] = None
    clean_g_mae: Optional[float] = None

    def value(self, metric: str) -> float:
        if metric not in METRIC_NAMES + ["degradation_pct"]:
            raise ConfigError(f"unknown metric '{metric}'")
        value = getattr(self, metric)
        return float("nan") if value is None else float(value)

    def to_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def build_report(attacked: np.ndarray, clean: np.ndarray, labels: np.ndarray) -> MetricsReport:
    """
    Full report for (m, tau, n) arrays of attacked predictions, clean predictions and labels

    Degradation compares the clean and attacked G-MAE; it is 0 when the two
    are equal (including the all-zero case).
    """
    attacked = np.asarray(attacked, dtype=np.float64)
    clean_gmae = g_mae(clean, labels)
    attacked_gmae = g_mae(attacked, labels)
    if attacked_gmae == clean_gmae:
        degradation = 0.0
    elif attacked_gmae > 0:
        degradation = degradation_pct(clean_gmae, attacked_gmae)
    else:
        degradation = None
    return MetricsReport(
        g_mae=attacked_gmae,
        l_mae=l_mae(attacked, clean),
        g_rmse=g_rmse(attacked, labels),
        l_rmse=l_rmse(attacked, clean),
        sample_count=attacked.shape[0] if attacked.ndim else 1,
        node_count=attacked.shape[-1] if attacked.ndim else 1,
        degradation_pct=degradation,
        clean_g_mae=clean_gmae,
    )


def horizon_breakdown(attacked: np.ndarray, clean: np.ndarray, labels: np.ndarray) -> List[Dict[str, float]]:
    """G-MAE and L-MAE per horizon step of (m, tau, n) arrays"""
    attacked = np.asarray(attacked, dtype=np.float64)
    _residual(attacked, labels, "horizon_breakdown")
    _residual(attacked, clean, "horizon_breakdown")
    if attacked.ndim != 3:
        raise ShapeError("horizon_breakdown", attacked.shape, (), "expected (m, tau, n)")
    rows = []
    for step in range(attacked.shape[1]):
        rows.append({
            "step": step + 1,
            "g_mae": g_mae(attacked[:, step], np.asarray(labels)[:, step]),
            "l_mae": l_mae(attacked[:, step], np.asarray(clean)[:, step]),
        })
    return rows


def aggregate_seeds(reports: Sequence[MetricsReport]) -> Dict[str, Tuple[float, float]]:
    """Mean and population standard deviation of each metric over repeated runs"""
    if not reports:
        raise ConfigError("nothing to aggregate")
    summary = {}
    for metric in METRIC_NAMES + ["degradation_pct"]:
        values = np.array([r.value(metric) for r in reports])
        summary[metric] = (float(np.mean(values)), float(np.std(values)))
    return summary


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Report holding the per-metric means of repeated runs"""
    summary = aggregate_seeds(reports)
    degradation = summary["degradation_pct"][0]
    return MetricsReport(
        g_mae=summary["g_mae"][0],
        l_mae=summary["l_mae"][0],
        g_rmse=summary["g_rmse"][0],
        l_rmse=summary["l_rmse"][0],
        sample_count=reports[0].sample_count,
        node_count=reports[0].node_count,
        degradation_pct=None if math.isnan(degradation) else degradation,
    )


def compare(reports: Mapping[str, MetricsReport]) -> List[Tuple[str, MetricsReport]]:
    """Rank methods by attacked G-MAE, largest first (name breaks ties)"""
    return sorted(reports.items(), key=lambda item: (-item[1].g_mae, item[0]))


def _fmt(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.4f}"


def render_table(rows: Sequence[Tuple[str, MetricsReport]]) -> str:
    """Aligned text rendering of ranked rows"""
    header = ["Method", "G-MAE", "L-MAE", "G-RMSE", "L-RMSE", "Degradation %"]
    body = [
        [name, _fmt(r.g_mae), _fmt(r.l_mae), _fmt(r.g_rmse), _fmt(r.l_rmse), _fmt(r.degradation_pct)]
        for name, r in rows
    ]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(line))
             for line in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_report_csv(rows: Sequence[Tuple[str, MetricsReport]], path: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [[name, r.g_mae, r.l_mae, r.g_rmse, r.l_rmse, r.value("degradation_pct")] for name, r in rows],
        columns=REPORT_COLUMNS,
    )
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info("Wrote report %s (%d rows)", path, len(rows))
    return path


def write_horizon_csv(rows: Sequence[Mapping[str, float]], path: str) -> Path:
    """Per-step rows from horizon_breakdown as step,g_mae,l_mae"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=HORIZON_COLUMNS).to_csv(path, index=False, lineterminator="\n")
    logger.info("Wrote horizon breakdown %s (%d steps)", path, len(rows))
    return path


def read_report_csv(path: str) -> List[Tuple[str, MetricsReport]]:
    """Rows of a report CSV; sample and node counts are not stored and read back as 0"""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise DataError(f"{path}: {e}") from None
    if [c.strip() for c in frame.columns] != REPORT_COLUMNS:
        raise DataError(f"{path}: expected columns {','.join(REPORT_COLUMNS)}")
    rows = []
    for line, record in zip(range(2, len(frame) + 2), frame.itertuples(index=False)):
        try:
            degradation = record.degradation_pct.strip()
            rows.append((record.method, MetricsReport(
                g_mae=float(record.g_mae),
                l_mae=float(record.l_mae),
                g_rmse=float(record.g_rmse),
                l_rmse=float(record.l_rmse),
                degradation_pct=float(degradation) if degradation else None,
            )))
        except (TypeError, ValueError) as e:
            raise DataError(f"{path}: {e}", row=line) from None
    if not rows:
        raise DataError(f"{path}: report has no rows")
    return rows
