"""Hand-written SVG scatter of accuracy against inference speed."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 800, 600
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 80, 30, 40, 70

MAP_COLUMNS = ("map_mean", "mAP", "map")
SPEED_COLUMNS = ("batches_per_sec", "speed")
LABEL_COLUMNS = ("key", "label", "config_id", "plan")


class EmptyPlotWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Point:
    label: str
    map_value: float
    speed: float
    anchor: str = ""
    reference: bool = False


def _pick(fieldnames: Sequence[str], options: Sequence[str]):
    for name in options:
        if name in fieldnames:
            return name
    return None


def read_points_csv(fh) -> list:
    """Points from a trials CSV or any CSV with mAP and speed columns."""
    reader = csv.DictReader(fh)
    if reader.fieldnames is None:
        return []
    map_col = _pick(reader.fieldnames, MAP_COLUMNS)
    speed_col = _pick(reader.fieldnames, SPEED_COLUMNS)
    missing = [name for name, col in (("mAP", map_col), ("batches_per_sec", speed_col)) if col is None]
    if missing:
        raise ValueError(f"CSV lacks required column(s): {', '.join(missing)}")
    label_col = _pick(reader.fieldnames, LABEL_COLUMNS)
    points = []
    for i, row in enumerate(reader, start=2):
        try:
            m, s = float(row[map_col]), float(row[speed_col])
        except (TypeError, ValueError):
            raise ValueError(f"line {i}: mAP and speed must be numbers") from None
        label = row.get(label_col, "") if label_col else ""
        points.append(Point(label or f"row{i - 1}", m, s, row.get("anchor", "") or ""))
    return points


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks, v = [], start
    while v <= hi + step * 1e-9:
        ticks.append(round(v, 10))
        v += step
    if ticks[-1] < hi:
        ticks.append(round(ticks[-1] + step, 10))
    return ticks


def _decimals(ticks: Sequence[float]) -> int:
    step = ticks[1] - ticks[0] if len(ticks) > 1 else 1.0
    for d in range(8):
        if abs(round(step, d) - step) < 1e-9 * max(1.0, abs(step)):
            return d
    return 8


def render_scatter(points: Iterable[Point], title: str = "mAP vs inference speed") -> str:
    """SVG document; identical input gives identical bytes."""
    points = list(points)
    if not points:
        warnings.warn("no points to plot; drawing empty axes", EmptyPlotWarning, stacklevel=2)
        xs_range, ys_range = (0.0, 1.0), (0.0, 1.0)
    else:
        xs = [p.speed for p in points]
        ys = [p.map_value for p in points]
        padx = (max(xs) - min(xs)) * 0.08 or max(abs(xs[0]) * 0.05, 0.5)
        pady = (max(ys) - min(ys)) * 0.08 or max(abs(ys[0]) * 0.05, 0.005)
        xs_range = (min(xs) - padx, max(xs) + padx)
        ys_range = (min(ys) - pady, max(ys) + pady)
    xticks = _nice_ticks(*xs_range)
    yticks = _nice_ticks(*ys_range)
    x0, x1 = xticks[0], xticks[-1]
    y0, y1 = yticks[0], yticks[-1]
    pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def sx(v):
        return MARGIN_LEFT + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return MARGIN_TOP + ph - (v - y0) / (y1 - y0) * ph

    xd, yd = _decimals(xticks), _decimals(yticks)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>',
        f'<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in xticks:
        x = sx(t)
        out.append(f'<line x1="{x:.2f}" y1="{MARGIN_TOP + ph}" x2="{x:.2f}" y2="{MARGIN_TOP + ph + 5}" stroke="black"/>')
        out.append(f'<line x1="{x:.2f}" y1="{MARGIN_TOP}" x2="{x:.2f}" y2="{MARGIN_TOP + ph}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{x:.2f}" y="{MARGIN_TOP + ph + 20}" text-anchor="middle">{t:.{xd}f}</text>')
    for t in yticks:
        y = sy(t)
        out.append(f'<line x1="{MARGIN_LEFT - 5}" y1="{y:.2f}" x2="{MARGIN_LEFT}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<line x1="{MARGIN_LEFT}" y1="{y:.2f}" x2="{MARGIN_LEFT + pw}" y2="{y:.2f}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{MARGIN_LEFT - 8}" y="{y + 4:.2f}" text-anchor="end">{t:.{yd}f}</text>')
    out.append(f'<text x="{MARGIN_LEFT + pw / 2:.1f}" y="{HEIGHT - 20}" text-anchor="middle">batches/sec</text>')
    out.append(f'<text x="20" y="{MARGIN_TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 20 {MARGIN_TOP + ph / 2:.1f})">mAP</text>')
    for p in points:
        x, y = sx(p.speed), sy(p.map_value)
        label = escape(p.label)
        if p.anchor:
            out.append(f'<rect x="{x - 6:.2f}" y="{y - 6:.2f}" width="12" height="12" fill="#d62728" '
                       f'stroke="black"><title>{label}</title></rect>')
            out.append(f'<text x="{x + 9:.2f}" y="{y - 8:.2f}" font-weight="bold">{escape(p.anchor)}</text>')
        elif p.reference:
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="5" fill="none" stroke="#7f7f7f">'
                       f'<title>{label}</title></circle>')
        else:
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="#1f77b4" fill-opacity="0.8">'
                       f'<title>{label}</title></circle>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(src, dst) -> int:
    """Render the CSV at ``src`` to ``dst``; returns the number of points."""
    with open(src, newline="", encoding="utf-8") as fh:
        points = read_points_csv(fh)
    svg = render_scatter(points)
    with open(dst, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    return len(points)
