"""
Unit tests for report plots

Coverage:
- Sweep-name parsing and curve grouping
- SVG structure and PNG previews
"""

import pytest
import sys
from pathlib import Path

from PIL import Image

# Add src to path
src_path = Path(__file__).parent.parent / "src"
sys.path.insert(0, str(src_path))

from stadv.errors import ConfigError
from stadv.metrics import METRIC_NAMES, MetricsReport, write_report_csv
from stadv.plotting import LinePlot, Series, build_plots, parse_sweep_name, plot_reports, render_svg, save_plot


def report(g: float) -> MetricsReport:
    return MetricsReport(g_mae=g, l_mae=g / 2, g_rmse=g * 1.2, l_rmse=g / 1.5)


# Fixtures
@pytest.fixture
def sweep_rows():
    return [
        ("STPGD-TDNS@epsilon=0.5", report(6.0)),
        ("STPGD-TDNS@epsilon=0.1", report(3.0)),
        ("STPGD-Random@epsilon=0.1", report(2.5)),
        ("STPGD-Random@epsilon=0.5", report(4.0)),
    ]


@pytest.mark.cli
class TestSweepNames:
    """Test sweep row names"""

    def test_parse(self):
        assert parse_sweep_name("STPGD-TDNS@batch-size=16") == ("STPGD-TDNS", "batch-size", 16.0)
        assert parse_sweep_name("STPGD-TDNS@eta=0.05") == ("STPGD-TDNS", "eta", 0.05)

    def test_plain_name(self):
        assert parse_sweep_name("STPGD-TDNS") is None


@pytest.mark.cli
class TestBuildPlots:
    """Test plot construction from report rows"""

    def test_one_plot_per_metric(self, sweep_rows):
        plots = build_plots(sweep_rows)
        assert list(plots) == METRIC_NAMES

    def test_sweep_curves(self, sweep_rows):
        plot = build_plots(sweep_rows)["g_mae"]
        assert plot.x_label == "epsilon"
        curves = {s.name: s.points for s in plot.series}
        assert curves["STPGD-TDNS"] == [(0.1, 3.0), (0.5, 6.0)]
        assert curves["STPGD-Random"] == [(0.1, 2.5), (0.5, 4.0)]

    def test_plain_rows(self):
        plot = build_plots([("A", report(1.0)), ("B", report(2.0))])["g_mae"]
        assert plot.x_label == "report"
        assert [s.name for s in plot.series] == ["A", "B"]

    def test_empty(self):
        with pytest.raises(ConfigError):
            build_plots([])


@pytest.mark.cli
class TestRendering:
    """Test SVG and PNG output"""

    def test_svg_has_one_polyline_per_series(self, sweep_rows):
        svg = render_svg(build_plots(sweep_rows)["l_mae"])
        assert svg.startswith("<svg")
        assert svg.count('<polyline class="series"') == 2
        assert "STPGD-Random" in svg

    def test_title_is_escaped(self):
        plot = LinePlot(title="a<b", x_label="x", y_label="y", series=[Series("s", [(0.0, 1.0)])])
        assert "a&lt;b" in render_svg(plot)

    def test_no_finite_points(self):
        plot = LinePlot(title="t", x_label="x", y_label="y", series=[Series("s", [(0.0, float("nan"))])])
        with pytest.raises(ConfigError):
            render_svg(plot)

    def test_save_with_preview(self, tmp_path):
        plot = LinePlot(title="t", x_label="x", y_label="y", series=[Series("s", [(0.0, 1.0), (1.0, 2.0)])])
        written = save_plot(plot, str(tmp_path), "g_mae")
        assert [p.name for p in written] == ["g_mae.svg", "g_mae.png"]
        with Image.open(written[1]) as image:
            assert image.size == (640, 420)

    def test_plot_reports(self, tmp_path, sweep_rows):
        path = write_report_csv(sweep_rows, str(tmp_path / "sweep-epsilon.csv"))
        written = plot_reports([str(path)], str(tmp_path / "plots"), preview=False)
        assert sorted(p.name for p in written) == sorted(f"{m}.svg" for m in METRIC_NAMES)
