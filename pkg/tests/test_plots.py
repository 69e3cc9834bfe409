"""SVG report generation from the survive and select stage CSVs."""

import math
import re

import pytest

from slidesurv import plots
from slidesurv.errors import DataError
from slidesurv.selection import ClusterReport, save_reports


def make_tree(root, km=None, roc=None, reports=None):
    """Write a minimal output tree with the CSVs emit_plots reads."""
    srv = root / "survive"
    srv.mkdir(parents=True)
    sel = root / "select"
    sel.mkdir()
    if km is None:
        km = {"high": [(5.0, 0.8), (10.0, 0.4), (20.0, 0.0)],
              "low": [(12.0, 0.5), (30.0, 0.25)]}
    for group, rows in km.items():
        lines = ["time,survival"] + [f"{t},{s}" for t, s in rows]
        (srv / f"km_{group}.csv").write_text("\n".join(lines) + "\n")
    if roc is None:
        roc = {"1": [(math.inf, 0.0, 0.0), (2.0, 0.0, 0.5),
                     (1.0, 0.5, 1.0), (0.0, 1.0, 1.0)]}
    for label, rows in roc.items():
        lines = ["threshold,fpr,tpr"] + [f"{a},{b},{c}" for a, b, c in rows]
        (srv / f"roc_{label}.csv").write_text("\n".join(lines) + "\n")
    if reports is None:
        reports = [ClusterReport(0, 10, 4, float("nan"), False),
                   ClusterReport(1, 12, 5, 0.8, True),
                   ClusterReport(2, 9, 6, 0.4, False)]
    save_reports(sel / "cluster_reports.csv", reports)
    return km, roc, reports


def test_emit_plots_writes_expected_files(tmp_path):
    make_tree(tmp_path)
    written = plots.emit_plots(tmp_path)
    assert written == ["km.svg", "roc_1.svg", "clusters.svg"]
    for name in written:
        text = (tmp_path / "report" / name).read_text()
        assert text.startswith("<svg ")
        assert text.rstrip().endswith("</svg>")


def test_km_svg_one_step_per_csv_row(tmp_path):
    km, _, _ = make_tree(tmp_path)
    plots.emit_plots(tmp_path)
    text = (tmp_path / "report" / "km.svg").read_text()
    paths = re.findall(r'<path d="([^"]+)"', text)
    assert len(paths) == len(km)
    # groups are drawn in sorted name order
    for d, group in zip(paths, sorted(km)):
        assert d.count("H ") == len(km[group])
        assert d.count("V ") == len(km[group])
        assert d.startswith("M ")
    for group in km:
        assert f">{group}</text>" in text


def test_roc_svg_polyline_matches_rows(tmp_path):
    _, roc, _ = make_tree(tmp_path)
    plots.emit_plots(tmp_path)
    text = (tmp_path / "report" / "roc_1.svg").read_text()
    points = re.search(r'<polyline points="([^"]+)"', text).group(1)
    assert len(points.split()) == len(roc["1"])
    assert "stroke-dasharray" in text  # chance diagonal
    assert "horizon 1" in text


def test_clusters_svg_bars_and_threshold(tmp_path):
    _, _, reports = make_tree(tmp_path)
    plots.emit_plots(tmp_path, threshold=0.55)
    text = (tmp_path / "report" / "clusters.svg").read_text()
    rects = re.findall(r'<rect x="[^"]+" y="[^"]+" width="[^"]+" '
                       r'height="([^"]+)" fill="([^"]+)"/>', text)
    assert len(rects) == len(reports)
    heights = [float(h) for h, _ in rects]
    assert heights[0] == 0.0          # nan bar collapses to zero height
    assert heights[1] > heights[2]    # 0.8 bar taller than 0.4 bar
    assert rects[1][1] == "#27ae60"   # selected bar is green
    assert rects[0][1] == rects[2][1] == "#aaaaaa"
    assert 'stroke-dasharray="6 4"' in text  # threshold rule


def test_emit_plots_into_custom_dest(tmp_path):
    make_tree(tmp_path)
    dest = tmp_path / "elsewhere"
    written = plots.emit_plots(tmp_path, dest=dest)
    assert sorted(p.name for p in dest.iterdir()) == sorted(written)


def test_emit_plots_is_byte_deterministic(tmp_path):
    make_tree(tmp_path)
    a = tmp_path / "a"
    b = tmp_path / "b"
    plots.emit_plots(tmp_path, dest=a)
    plots.emit_plots(tmp_path, dest=b)
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes()


def test_no_km_files_skips_km_svg(tmp_path):
    make_tree(tmp_path, km={})
    written = plots.emit_plots(tmp_path)
    assert written == ["roc_1.svg", "clusters.svg"]
    assert not (tmp_path / "report" / "km.svg").exists()


def test_multiple_roc_horizons(tmp_path):
    roc = {"1": [(math.inf, 0.0, 0.0), (0.5, 1.0, 1.0)],
           "2.5": [(math.inf, 0.0, 0.0), (0.1, 1.0, 1.0)]}
    make_tree(tmp_path, roc=roc)
    written = plots.emit_plots(tmp_path)
    assert written == ["km.svg", "roc_1.svg", "roc_2.5.svg", "clusters.svg"]


def test_missing_survive_dir_raises(tmp_path):
    (tmp_path / "select").mkdir()
    save_reports(tmp_path / "select" / "cluster_reports.csv",
                 [ClusterReport(0, 1, 1, 0.5, True)])
    with pytest.raises(DataError, match="survive"):
        plots.emit_plots(tmp_path)


def test_missing_cluster_reports_raises(tmp_path):
    (tmp_path / "survive").mkdir()
    with pytest.raises(DataError, match="cluster_reports"):
        plots.emit_plots(tmp_path)


def test_bad_csv_header_raises(tmp_path):
    make_tree(tmp_path)
    (tmp_path / "survive" / "km_high.csv").write_text("days,surv\n1,0.5\n")
    with pytest.raises(DataError, match="header"):
        plots.emit_plots(tmp_path)
