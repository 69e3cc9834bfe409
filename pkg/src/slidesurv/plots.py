"""Deterministic SVG plots from the stage CSVs.

Pure text generation with fixed float formatting: identical inputs give
byte-identical files. Three artifacts: survival step curves per risk group,
one ROC curve per horizon, and per-cluster concordance bars with the
selection threshold drawn as a dashed rule.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

from .data import ensure_dir
from .errors import DataError
from .selection import load_reports

WIDTH, HEIGHT = 640, 480
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 20, 50
PLOT_W = WIDTH - LEFT - RIGHT
PLOT_H = HEIGHT - TOP - BOTTOM
PALETTE = ["#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400", "#16a085"]


def _n(v: float) -> str:
    return f"{v:.3f}"


def _x(frac: float) -> float:
    return LEFT + frac * PLOT_W


def _y(frac: float) -> float:
    return TOP + (1.0 - frac) * PLOT_H


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="14" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{title}</text>',
    ]


def _axes(x_label: str, y_label: str, x_ticks, y_ticks) -> list[str]:
    parts = [
        f'<line x1="{_n(_x(0))}" y1="{_n(_y(0))}" x2="{_n(_x(1))}" '
        f'y2="{_n(_y(0))}" stroke="black"/>',
        f'<line x1="{_n(_x(0))}" y1="{_n(_y(0))}" x2="{_n(_x(0))}" '
        f'y2="{_n(_y(1))}" stroke="black"/>',
        f'<text x="{_n(_x(0.5))}" y="{HEIGHT - 10}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{x_label}</text>',
        f'<text x="14" y="{_n(_y(0.5))}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 14 {_n(_y(0.5))})">{y_label}</text>',
    ]
    for frac, label in x_ticks:
        parts.append(f'<text x="{_n(_x(frac))}" y="{_n(_y(0) + 16)}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{label}</text>')
    for frac, label in y_ticks:
        parts.append(f'<text x="{_n(_x(0) - 6)}" y="{_n(_y(frac) + 3)}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{label}</text>')
    return parts


def _read_rows(path: Path, expect: list[str]) -> list[list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != expect:
        raise DataError(f"{path}: expected header {','.join(expect)}")
    return [[float(v) for v in row] for row in rows[1:]]


def km_svg(group_curves: dict[str, list[list[float]]]) -> str:
    """One step path per group; each CSV row is one horizontal segment."""
    t_max = max((row[0] for rows in group_curves.values() for row in rows),
                default=1.0)
    t_max = t_max if t_max > 0 else 1.0
    parts = _header("survival by risk group")
    parts += _axes("days", "survival",
                   [(0, "0"), (0.5, f"{t_max / 2:.0f}"), (1, f"{t_max:.0f}")],
                   [(0, "0.0"), (0.5, "0.5"), (1, "1.0")])
    for gi, (group, rows) in enumerate(sorted(group_curves.items())):
        color = PALETTE[gi % len(PALETTE)]
        d = [f"M {_n(_x(0))} {_n(_y(1.0))}"]
        for t, s in rows:
            d.append(f"H {_n(_x(t / t_max))}")
            d.append(f"V {_n(_y(s))}")
        parts.append(f'<path d="{" ".join(d)}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_n(_x(1) - 4)}" y="{_n(TOP + 16 + 14 * gi)}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="11" fill="{color}">{group}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def roc_svg(label: str, rows: list[list[float]]) -> str:
    """Polyline through (fpr, tpr) in CSV order plus the chance diagonal."""
    parts = _header(f"time-dependent ROC, horizon {label}")
    parts += _axes("false positive rate", "true positive rate",
                   [(0, "0.0"), (0.5, "0.5"), (1, "1.0")],
                   [(0, "0.0"), (0.5, "0.5"), (1, "1.0")])
    parts.append(f'<line x1="{_n(_x(0))}" y1="{_n(_y(0))}" x2="{_n(_x(1))}" '
                 f'y2="{_n(_y(1))}" stroke="#999999" stroke-dasharray="4 3"/>')
    points = " ".join(f"{_n(_x(fpr))},{_n(_y(tpr))}" for _, fpr, tpr in rows)
    parts.append(f'<polyline points="{points}" fill="none" '
                 f'stroke="{PALETTE[0]}" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def clusters_svg(reports, threshold: float) -> str:
    """One concordance bar per cluster and a dashed threshold rule."""
    parts = _header("held-out concordance per cluster")
    n = max(len(reports), 1)
    ticks = [(i, str(r.cluster_id)) for i, r in enumerate(reports)]
    slot = 1.0 / n
    parts += _axes("cluster", "C-index",
                   [((i + 0.5) * slot, lab) for i, lab in ticks],
                   [(0, "0.0"), (0.5, "0.5"), (1, "1.0")])
    for i, rep in enumerate(reports):
        value = 0.0 if math.isnan(rep.test_cindex) else rep.test_cindex
        x0 = _x((i + 0.15) * slot)
        width = 0.7 * slot * PLOT_W
        color = PALETTE[2] if rep.selected else "#aaaaaa"
        parts.append(f'<rect x="{_n(x0)}" y="{_n(_y(value))}" '
                     f'width="{_n(width)}" height="{_n(_y(0) - _y(value))}" '
                     f'fill="{color}"/>')
    parts.append(f'<line x1="{_n(_x(0))}" y1="{_n(_y(threshold))}" '
                 f'x2="{_n(_x(1))}" y2="{_n(_y(threshold))}" '
                 f'stroke="black" stroke-dasharray="6 4"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_plots(output_root, dest=None, threshold: float = 0.55) -> list[str]:
    """Render SVGs from the survive and select CSVs under ``output_root``.

    Returns the file names written into ``dest`` (default:
    ``output_root/report``). Raises when the upstream CSVs are absent.
    """
    output_root = Path(output_root)
    srv = output_root / "survive"
    reports_csv = output_root / "select" / "cluster_reports.csv"
    if not srv.is_dir():
        raise DataError(f"missing survive outputs under {srv}")
    if not reports_csv.exists():
        raise DataError(f"missing {reports_csv}")
    dest = ensure_dir(output_root / "report" if dest is None else dest)

    written = []
    km_files = sorted(srv.glob("km_*.csv"))
    if km_files:
        curves = {p.stem[len("km_"):]: _read_rows(p, ["time", "survival"])
                  for p in km_files}
        (dest / "km.svg").write_text(km_svg(curves))
        written.append("km.svg")
    for path in sorted(srv.glob("roc_*.csv")):
        label = path.stem[len("roc_"):]
        rows = _read_rows(path, ["threshold", "fpr", "tpr"])
        name = f"roc_{label}.svg"
        (dest / name).write_text(roc_svg(label, rows))
        written.append(name)
    reports = load_reports(reports_csv)
    (dest / "clusters.svg").write_text(clusters_svg(reports, threshold))
    written.append("clusters.svg")
    return written
