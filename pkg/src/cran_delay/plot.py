"""Minimal SVG line plots of a metrics CSV (one polyline per policy)."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
WIDTH, HEIGHT = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 80, 150, 40, 60


def read_metrics(path) -> dict:
    """{policy: [(sweep_value, mean, ci_low, ci_high), ...]} in file order."""
    series = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            series.setdefault(row["policy"], []).append(
                tuple(float(row[k]) for k in ("sweep_value", "mean_metric", "ci_low",
                                              "ci_high")))
    return series


def _ticks(lo: float, hi: float, count: int = 5) -> list:
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / count))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= count:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step) + 1)]


def svg_plot(series: dict, title: str, xlabel: str, ylabel: str) -> str:
    finite = [(x, y) for pts in series.values() for x, y, _, _ in pts if math.isfinite(y)]
    xs = [x for pts in series.values() for x, *_ in pts]
    if not xs:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs), max(xs)
    ys = [y for _, y in finite] or [0.0, 1.0]
    y0, y1 = 0.0, max(ys) * 1.1 or 1.0
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    sx = lambda x: LEFT + (x - x0) / (x1 - x0 or 1.0) * pw
    sy = lambda y: TOP + ph - (y - y0) / (y1 - y0) * ph
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
           f'{escape(title)}</text>',
           f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" '
           f'stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.1f}" y="{TOP + ph + 18}" text-anchor="middle">'
                   f'{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{LEFT - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
        out.append(f'<line x1="{LEFT}" x2="{LEFT + pw}" y1="{sy(t):.1f}" y2="{sy(t):.1f}" '
                   f'stroke="#ddd"/>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text transform="translate(18 {TOP + ph / 2:.1f}) rotate(-90)" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    for k, (name, pts) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        run = []
        for x, y, lo, hi in pts:
            if not math.isfinite(y):
                # unstable point, drawn at the top edge as in the usual "inf" label
                out.append(f'<text x="{sx(x):.1f}" y="{TOP - 4}" fill="{color}" '
                           f'text-anchor="middle">inf</text>')
                if len(run) > 1:
                    out.append(_polyline(run, color))
                run = []
                continue
            run.append((sx(x), sy(y)))
            if math.isfinite(lo) and math.isfinite(hi):
                out.append(f'<line x1="{sx(x):.1f}" x2="{sx(x):.1f}" y1="{sy(lo):.1f}" '
                           f'y2="{sy(hi):.1f}" stroke="{color}"/>')
            out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        if len(run) > 1:
            out.append(_polyline(run, color))
        ly = TOP + 16 + 18 * k
        out.append(f'<line x1="{LEFT + pw + 12}" x2="{LEFT + pw + 32}" y1="{ly}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 38}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _polyline(points, color) -> str:
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in points)
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>'


def plot_metrics_csv(csv_path, svg_path, title: str, xlabel: str, ylabel: str) -> Path:
    svg_path = Path(svg_path)
    svg_path.write_text(svg_plot(read_metrics(csv_path), title, xlabel, ylabel))
    return svg_path
