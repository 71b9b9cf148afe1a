"""Deterministic SVG line plots from metric CSVs.

Output depends only on the input values: coordinates are printed with fixed
precision and nothing time- or host-dependent is embedded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .errors import ContractError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 50


@dataclass(frozen=True)
class PlotSpec:
    x: str
    ys: tuple
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    group_by: str | None = None
    labels: dict = field(default_factory=dict)


def read_csv(path) -> list[dict]:
    """Rows of a CSV file, skipping ``#`` comment lines."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _num(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return float("nan")


def _series(rows, spec: PlotSpec) -> list[tuple[str, list]]:
    if not rows:
        raise ContractError("no rows to plot")
    for col in (spec.x, *spec.ys, *([spec.group_by] if spec.group_by else [])):
        if col not in rows[0]:
            raise ContractError(f"missing column {col!r}")
    out = []
    groups = [None]
    if spec.group_by:
        groups = sorted({r[spec.group_by] for r in rows}, key=lambda g: (_num(g), g))
    for g in groups:
        sub = rows if g is None else [r for r in rows if r[spec.group_by] == g]
        for y in spec.ys:
            pts = [(_num(r[spec.x]), _num(r[y])) for r in sub]
            pts = [(a, b) for a, b in pts if math.isfinite(a) and math.isfinite(b)]
            name = spec.labels.get(y, y)
            if g is not None:
                name = f"{name} ({spec.group_by}={g})" if len(spec.ys) > 1 else f"{spec.group_by}={g}"
            out.append((name, pts))
    return out


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_svg(rows, spec: PlotSpec) -> str:
    series = _series(rows, spec)
    xs = [p[0] for _, pts in series for p in pts]
    ys = [p[1] for _, pts in series for p in pts]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x0 == x1:
        x0, x1 = x0 - 1.0, x1 + 1.0
    if y0 == y1:
        pad = abs(y0) * 0.1 or 1.0
        y0, y1 = y0 - pad, y1 + pad
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(v):
        return LEFT + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return TOP + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{_esc(spec.title)}</text>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.2f}" y1="{TOP + ph}" x2="{sx(t):.2f}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{TOP + ph + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{LEFT - 4}" y1="{sy(t):.2f}" x2="{LEFT}" y2="{sy(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{sy(t) + 3:.2f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{t:.4g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{_esc(spec.xlabel or spec.x)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{_esc(spec.ylabel)}</text>')
    for i, (name, pts) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if len(pts) > 1:
            path = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a, b in pts if len(pts) <= 30 else pts[:: max(1, len(pts) // 30)]:
            out.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="{color}"/>')
        ly = TOP + 14 * i + 6
        out.append(f'<rect x="{LEFT + pw + 10}" y="{ly - 6}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{LEFT + pw + 24}" y="{ly + 3}" font-family="sans-serif" font-size="10">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg(csv_path, spec: PlotSpec, out_path) -> str:
    svg = render_svg(read_csv(csv_path), spec)
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    return svg
