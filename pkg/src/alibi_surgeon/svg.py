"""Hand-written SVG figures: layer x head heatmaps, histograms and line charts.

Output is plain text with fixed number formatting so identical inputs give
byte-identical files.
"""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def _color(v: float, vmax: float = 1.0) -> str:
    """White -> dark red ramp."""
    t = 0.0 if vmax <= 0 else min(max(v / vmax, 0.0), 1.0)
    r = int(round(255 - 120 * t))
    g = int(round(255 - 235 * t))
    b = int(round(255 - 225 * t))
    return f"#{r:02x}{g:02x}{b:02x}"


class Canvas:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.parts: list[str] = []

    def rect(self, x, y, w, h, fill, stroke="none", extra=""):
        self.parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{w:.1f}" height="{h:.1f}" fill="{fill}" stroke="{stroke}"{extra}/>'
        )

    def text(self, x, y, s, size=11, anchor="middle", extra=""):
        self.parts.append(
            f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" font-family="sans-serif" '
            f'text-anchor="{anchor}"{extra}>{escape(str(s))}</text>'
        )

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" stroke="{stroke}" stroke-width="{width:.1f}"{d}/>'
        )

    def polyline(self, pts, stroke, width=1.5):
        p = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        self.parts.append(f'<polyline points="{p}" fill="none" stroke="{stroke}" stroke-width="{width:.1f}"/>')

    def circle(self, x, y, r, fill):
        self.parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{r:.1f}" fill="{fill}"/>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">')
        body = "\n".join(self.parts)
        return f'{head}\n<rect width="100%" height="100%" fill="#ffffff"/>\n{body}\n</svg>\n'


def heatmap(values, title: str, band: Sequence[int] | None = None, vmax: float = 1.0,
            marks: set[tuple[int, int]] | None = None, annotate: bool = True) -> str:
    """Layer (rows) x head (columns) grid; ``band`` outlines a column range, ``marks`` circles cells."""
    grid = np.asarray(values, dtype=np.float64)
    L, H = grid.shape
    cell, left, top = 34, 50, 44
    c = Canvas(left + H * cell + 90, top + L * cell + 40)
    c.text(c.width / 2, 20, title, size=14)
    for h in range(H):
        c.text(left + h * cell + cell / 2, top - 6, f"H{h}", size=10)
    for l in range(L):
        c.text(left - 6, top + l * cell + cell / 2 + 4, f"L{l}", size=10, anchor="end")
        for h in range(H):
            v = grid[l, h]
            x, y = left + h * cell, top + l * cell
            if np.isnan(v):
                c.rect(x, y, cell, cell, "#eeeeee", "#ffffff")
                continue
            c.rect(x, y, cell, cell, _color(v, vmax), "#ffffff")
            if annotate:
                fill = "#ffffff" if v / (vmax or 1) > 0.6 else "#000000"
                c.text(x + cell / 2, y + cell / 2 + 4, f"{v:.2f}", size=9, extra=f' fill="{fill}"')
            if marks and (l, h) in marks:
                c.circle(x + 5, y + 5, 2.5, "#1f77b4")
    if band:
        a, b = band
        c.rect(left + a * cell, top, (b - a + 1) * cell, L * cell, "none", "#1f77b4",
               extra=' stroke-width="2.5" stroke-dasharray="6,3"')
    # colour scale
    sx = left + H * cell + 25
    for i in range(10):
        c.rect(sx, top + (9 - i) * 12, 16, 12, _color((i + 0.5) / 10 * vmax, vmax))
    c.text(sx + 20, top + 8, f"{vmax:.2f}", size=9, anchor="start")
    c.text(sx + 20, top + 120, "0", size=9, anchor="start")
    return c.render()


def histogram(values: Sequence[float], title: str, bins: int = 20, lo: float = 0.0, hi: float = 1.0,
              threshold: float | None = 0.5) -> tuple[str, list[int]]:
    """Bar histogram over [lo, hi]; returns the SVG and the bucket counts."""
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), lo, hi)
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    W, Hh, left, top, bottom = 520, 300, 50, 40, 40
    c = Canvas(W, Hh)
    c.text(W / 2, 22, title, size=14)
    pw, ph = W - left - 20, Hh - top - bottom
    cmax = max(int(counts.max()), 1)
    bw = pw / bins
    for i, n in enumerate(counts):
        h = ph * n / cmax
        c.rect(left + i * bw + 1, top + ph - h, bw - 2, h, "#7f3b08" if edges[i] >= (threshold or hi) else "#4a90c2")
        if n:
            c.text(left + i * bw + bw / 2, top + ph - h - 3, str(int(n)), size=9)
    c.line(left, top + ph, left + pw, top + ph)
    for t in np.linspace(lo, hi, 6):
        x = left + pw * (t - lo) / (hi - lo)
        c.text(x, top + ph + 14, f"{t:.1f}", size=10)
    if threshold is not None:
        x = left + pw * (threshold - lo) / (hi - lo)
        c.line(x, top, x, top + ph, stroke="#d62728", dash="4,3")
    c.text(W / 2, Hh - 6, "BOS mass", size=11)
    return c.render(), [int(n) for n in counts]


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str,
               xlabel: str = "step", ylabel: str = "", hline: float | None = None) -> str:
    W, Hh, left, top, bottom, right = 600, 340, 60, 40, 45, 130
    c = Canvas(W, Hh)
    c.text((W - right) / 2 + left / 2, 22, title, size=14)
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv]
    if hline is not None:
        ys.append(hline)
    if not xs:
        c.text(W / 2, Hh / 2, "no data")
        return c.render()
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys + [0.0]), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = W - left - right, Hh - top - bottom

    def px(x):
        return left + pw * (x - x0) / (x1 - x0)

    def py(y):
        return top + ph - ph * (y - y0) / (y1 - y0)

    c.line(left, top + ph, left + pw, top + ph)
    c.line(left, top, left, top + ph)
    for t in np.linspace(y0, y1, 5):
        c.text(left - 6, py(t) + 4, f"{t:.3g}", size=9, anchor="end")
    for t in np.linspace(x0, x1, 5):
        c.text(px(t), top + ph + 14, f"{t:.4g}", size=9)
    c.text(left + pw / 2, Hh - 8, xlabel, size=11)
    if ylabel:
        c.text(14, top + ph / 2, ylabel, size=11, extra=f' transform="rotate(-90 14 {top + ph / 2:.1f})"')
    if hline is not None:
        c.line(left, py(hline), left + pw, py(hline), stroke="#888888", dash="4,3")
    for i, (name, (xv, yv)) in enumerate(series.items()):
        col = PALETTE[i % len(PALETTE)]
        pts = [(px(x), py(y)) for x, y in zip(xv, yv)]
        if len(pts) > 1:
            c.polyline(pts, col)
        for x, y in pts:
            c.circle(x, y, 2.5, col)
        ly = top + 10 + 16 * i
        c.line(left + pw + 12, ly, left + pw + 30, ly, stroke=col, width=2)
        c.text(left + pw + 34, ly + 4, name, size=10, anchor="start")
    return c.render()
