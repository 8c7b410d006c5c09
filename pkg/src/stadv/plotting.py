"""
Static line plots of report CSVs

Each metric gets one SVG file drawn directly (axes, one polyline per series,
legend) plus a PNG preview rendered with Pillow.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

from PIL import Image, ImageDraw

from stadv.errors import ConfigError
from stadv.metrics import METRIC_NAMES, MetricsReport, read_report_csv

logger = logging.getLogger(__name__)

WIDTH = 640
HEIGHT = 420
MARGIN_LEFT = 70
MARGIN_RIGHT = 170
MARGIN_TOP = 40
MARGIN_BOTTOM = 55
TICKS = 5
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]

SWEEP_PATTERN = re.compile(r"^(?P<label>.+)@(?P<param>[\w-]+)=(?P<value>[-+0-9.eE]+)$")


@dataclass
class Series:
    """One named polyline"""
    name: str
    points: List[Tuple[float, float]] = field(default_factory=list)


@dataclass
class LinePlot:
    """Plot description shared by the SVG and PNG renderers"""
    title: str
    x_label: str
    y_label: str
    series: List[Series] = field(default_factory=list)

    def bounds(self) -> Tuple[float, float, float, float]:
        xs = [x for s in self.series for x, _ in s.points]
        ys = [y for s in self.series for _, y in s.points if math.isfinite(y)]
        if not xs or not ys:
            raise ConfigError(f"plot '{self.title}' has no finite points")
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(0.0, min(ys)), max(ys)
        if x0 == x1:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y0 == y1:
            y1 = y0 + 1.0
        return x0, x1, y0, y1 + 0.05 * (y1 - y0)


def _scale(plot: LinePlot):
    x0, x1, y0, y1 = plot.bounds()
    inner_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    inner_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def to_pixel(x: float, y: float) -> Tuple[float, float]:
        px = MARGIN_LEFT + (x - x0) / (x1 - x0) * inner_w
        py = MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * inner_h
        return round(px, 2), round(py, 2)

    return to_pixel, (x0, x1, y0, y1)


def _ticks(low: float, high: float) -> List[float]:
    return [low + (high - low) * k / (TICKS - 1) for k in range(TICKS)]


def _label(value: float) -> str:
    return f"{value:.3g}"


def render_svg(plot: LinePlot) -> str:
    to_pixel, (x0, x1, y0, y1) = _scale(plot)
    left, top = MARGIN_LEFT, MARGIN_TOP
    right, bottom = WIDTH - MARGIN_RIGHT, HEIGHT - MARGIN_BOTTOM
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(plot.title)}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
    ]
    for x in _ticks(x0, x1):
        px, _ = to_pixel(x, y0)
        parts.append(f'<line x1="{px}" y1="{bottom}" x2="{px}" y2="{bottom + 5}" stroke="black"/>')
        parts.append(f'<text x="{px}" y="{bottom + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{_label(x)}</text>')
    for y in _ticks(y0, y1):
        _, py = to_pixel(x0, y)
        parts.append(f'<line x1="{left - 5}" y1="{py}" x2="{left}" y2="{py}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{py + 4}" text-anchor="end" font-family="sans-serif" font-size="11">{_label(y)}</text>')
    parts.append(f'<text x="{(left + right) / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(plot.x_label)}</text>')
    parts.append(f'<text x="16" y="{(top + bottom) / 2}" text-anchor="middle" font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 16 {(top + bottom) / 2})">{escape(plot.y_label)}</text>')

    for index, series in enumerate(plot.series):
        color = PALETTE[index % len(PALETTE)]
        points = [to_pixel(x, y) for x, y in series.points if math.isfinite(y)]
        coords = " ".join(f"{px},{py}" for px, py in points)
        parts.append(f'<polyline class="series" points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for px, py in points:
            parts.append(f'<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>')
        ly = top + 10 + 18 * index
        parts.append(f'<line x1="{right + 12}" y1="{ly}" x2="{right + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{right + 38}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(series.name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_png(plot: LinePlot) -> Image.Image:
    to_pixel, _ = _scale(plot)
    image = Image.new("RGB", (WIDTH, HEIGHT), "white")
    draw = ImageDraw.Draw(image)
    left, top = MARGIN_LEFT, MARGIN_TOP
    right, bottom = WIDTH - MARGIN_RIGHT, HEIGHT - MARGIN_BOTTOM
    draw.line([(left, bottom), (right, bottom)], fill="black")
    draw.line([(left, top), (left, bottom)], fill="black")
    draw.text((left, 12), plot.title, fill="black")
    for index, series in enumerate(plot.series):
        color = PALETTE[index % len(PALETTE)]
        points = [to_pixel(x, y) for x, y in series.points if math.isfinite(y)]
        if len(points) > 1:
            draw.line(points, fill=color, width=2)
        for px, py in points:
            draw.ellipse([px - 3, py - 3, px + 3, py + 3], fill=color)
        ly = top + 10 + 18 * index
        draw.line([(right + 12, ly), (right + 32, ly)], fill=color, width=2)
        draw.text((right + 38, ly - 6), series.name, fill="black")
    return image


def save_plot(plot: LinePlot, out_dir: str, stem: str, preview: bool = True) -> List[Path]:
    """Write <stem>.svg (and <stem>.png) into out_dir"""
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    svg_path = directory / f"{stem}.svg"
    svg_path.write_text(render_svg(plot), encoding="utf-8")
    written = [svg_path]
    if preview:
        png_path = directory / f"{stem}.png"
        render_png(plot).save(png_path)
        written.append(png_path)
    return written


def parse_sweep_name(name: str) -> Optional[Tuple[str, str, float]]:
    """Split '<label>@<param>=<value>' into its parts, or None"""
    match = SWEEP_PATTERN.match(name)
    if match is None:
        return None
    return match.group("label"), match.group("param"), float(match.group("value"))


def build_plots(rows: Sequence[Tuple[str, MetricsReport]], source: str = "") -> Dict[str, LinePlot]:
    """
    One plot per metric

    Sweep rows become one curve per attack label over the swept parameter.
    Other rows become one curve per method over the report index.
    """
    if not rows:
        raise ConfigError("nothing to plot")
    plots = {}
    for metric in METRIC_NAMES:
        grouped: Dict[str, Series] = {}
        x_label = "report"
        for index, (name, report) in enumerate(rows):
            sweep = parse_sweep_name(name)
            if sweep is not None:
                label, param, value = sweep
                x_label = param
                grouped.setdefault(label, Series(label)).points.append((value, report.value(metric)))
            else:
                grouped.setdefault(name, Series(name)).points.append((float(index), report.value(metric)))
        for series in grouped.values():
            series.points.sort()
        title = metric.replace("_", "-").upper() + (f" ({source})" if source else "")
        plots[metric] = LinePlot(title=title, x_label=x_label, y_label=metric, series=list(grouped.values()))
    return plots


def plot_reports(paths: Sequence[str], out_dir: str, preview: bool = True) -> List[Path]:
    """Read report CSVs and write one SVG (+ PNG) per metric"""
    if not paths:
        raise ConfigError("plot needs at least one report CSV")
    rows = []
    for path in paths:
        rows.extend(read_report_csv(path))
    source = Path(paths[0]).stem if len(paths) == 1 else ""
    written = []
    for metric, plot in build_plots(rows, source).items():
        written.extend(save_plot(plot, out_dir, metric, preview))
    logger.info("Wrote %d plot file(s) to %s", len(written), out_dir)
    return written
