"""Static figures without a plotting library.

The comparison figures are small hand-assembled SVG documents: every
box, whisker, and tick is placed from summary statistics, so the files
stay deterministic and diffable. The qualitative panel is a rasterized
grid of image tiles.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np
from PIL import Image, ImageDraw

from .metrics import Stats

_FONT = "font-family=\"Helvetica, Arial, sans-serif\""


def _nice_step(span: float) -> float:
    """Tick spacing: 1/2/5 times a power of ten, about five ticks."""
    raw = span / 5.0
    mag = 10.0 ** math.floor(math.log10(raw))
    for m in (1.0, 2.0, 5.0, 10.0):
        if raw <= m * mag:
            return m * mag
    return 10.0 * mag


def _fmt(v: float) -> str:
    return f"{v:.10g}"


class _Canvas:
    """Accumulates SVG elements inside one plot area."""

    def __init__(self, width: int, height: int, lo: float, hi: float,
                 left: int = 52, right: int = 14, top: int = 30,
                 bottom: int = 38):
        self.width, self.height = width, height
        self.lo, self.hi = lo, hi
        self.left, self.right, self.top, self.bottom = left, right, top, bottom
        self.plot_w = width - left - right
        self.plot_h = height - top - bottom
        self.parts: list[str] = []

    def y(self, v: float) -> float:
        frac = (v - self.lo) / (self.hi - self.lo)
        return self.top + (1.0 - frac) * self.plot_h

    def line(self, x1, y1, x2, y2, color="#444", width=1.0):
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" '
            f'y2="{_fmt(y2)}" stroke="{color}" stroke-width="{_fmt(width)}"/>')

    def rect(self, x, y, w, h, fill, stroke="#31506b"):
        self.parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" '
            f'height="{_fmt(h)}" fill="{fill}" stroke="{stroke}"/>')

    def text(self, x, y, s, size=11, anchor="middle", transform=""):
        tr = f' transform="{escape(transform)}"' if transform else ""
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" {_FONT} font-size="{size}" '
            f'text-anchor="{anchor}" fill="#222"{tr}>{escape(s)}</text>')

    def axes(self, title: str, ylabel: str) -> None:
        x0, y0 = self.left, self.top + self.plot_h
        self.line(x0, self.top, x0, y0)
        self.line(x0, y0, x0 + self.plot_w, y0)
        step = _nice_step(self.hi - self.lo)
        tick = math.ceil(self.lo / step) * step
        while tick <= self.hi + 1e-9:
            ty = self.y(tick)
            self.line(x0 - 4, ty, x0, ty)
            self.line(x0, ty, x0 + self.plot_w, ty, color="#ddd", width=0.5)
            self.text(x0 - 7, ty + 3.5, f"{tick:g}", size=10, anchor="end")
            tick += step
        self.text(self.width / 2, 18, title, size=13)
        ymid = self.top + self.plot_h / 2
        self.text(12, ymid, ylabel, size=11,
                  transform=f"rotate(-90 12 {_fmt(ymid)})")

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" '
                f'width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">\n'
                f'<rect width="{self.width}" height="{self.height}" fill="white"/>\n'
                f"{body}\n</svg>\n")


def _metric_range(stats: list[Stats]) -> tuple[float, float]:
    finite = [s for s in stats if s.n > 0]
    lo = min([0.0] + [s.min for s in finite])
    hi = max([1.0] + [s.max for s in finite])
    return lo, hi


def svg_boxplot(groups: dict[str, Stats], title: str, ylabel: str) -> str:
    """One box per group: quartile box, median line, min/max whiskers."""
    if not groups:
        raise ValueError("svg_boxplot: no groups")
    slot = 86
    lo, hi = _metric_range(list(groups.values()))
    c = _Canvas(width=52 + 14 + slot * len(groups), height=300, lo=lo, hi=hi)
    c.axes(title, ylabel)
    base_y = c.top + c.plot_h
    for i, (label, s) in enumerate(groups.items()):
        cx = c.left + slot * (i + 0.5)
        c.text(cx, base_y + 16, label, size=11)
        if s.n == 0:
            c.text(cx, c.y(0.5), "no data", size=10)
            continue
        c.text(cx, base_y + 30, f"n={s.n}", size=9)
        half = 18
        c.line(cx, c.y(s.min), cx, c.y(s.q1))
        c.line(cx, c.y(s.q3), cx, c.y(s.max))
        for v in (s.min, s.max):
            c.line(cx - 8, c.y(v), cx + 8, c.y(v))
        c.rect(cx - half, c.y(s.q3), 2 * half, c.y(s.q1) - c.y(s.q3),
               fill="#d8e4ef")
        c.line(cx - half, c.y(s.median), cx + half, c.y(s.median),
               color="#b03a2e", width=1.5)
    return c.render()


def svg_metric_bars(groups: dict[str, dict[str, Stats]], title: str) -> str:
    """Side-by-side mean bars per group with quartile whiskers.

    ``groups`` maps group label -> metric name -> Stats; every group
    must carry the same metrics.
    """
    if not groups:
        raise ValueError("svg_metric_bars: no groups")
    metric_names = list(next(iter(groups.values())))
    for label, per in groups.items():
        if list(per) != metric_names:
            raise ValueError(f"group {label!r} has mismatched metrics")
    fills = ("#6f9fc8", "#d49a6a", "#8fbf8f", "#b59cc8")
    slot = 40 + 26 * len(metric_names)
    all_stats = [s for per in groups.values() for s in per.values()]
    lo, hi = _metric_range(all_stats)
    c = _Canvas(width=52 + 14 + slot * len(groups), height=300, lo=lo, hi=hi)
    c.axes(title, "score")
    base_y = c.top + c.plot_h
    for j, m in enumerate(metric_names):
        lx = c.left + 8 + 78 * j
        c.rect(lx, c.top - 16, 10, 10, fill=fills[j % len(fills)])
        c.text(lx + 14, c.top - 7, m, size=10, anchor="start")
    for i, (label, per) in enumerate(groups.items()):
        gx = c.left + slot * i + 20
        c.text(gx + 13 * len(metric_names), base_y + 16, label, size=11)
        for j, m in enumerate(metric_names):
            s = per[m]
            if s.n == 0:
                continue
            bx = gx + 26 * j
            c.rect(bx, c.y(s.mean), 22, base_y - c.y(s.mean),
                   fill=fills[j % len(fills)])
            mid = bx + 11
            c.line(mid, c.y(s.q1), mid, c.y(s.q3), color="#333")
            for v in (s.q1, s.q3):
                c.line(mid - 5, c.y(v), mid + 5, c.y(v), color="#333")
    return c.render()


def _to_tile(arr: np.ndarray, upscale: int) -> Image.Image:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"panel tiles must be HxW, got {a.shape}")
    img = Image.fromarray((np.clip(a, 0.0, 1.0) * 255).astype(np.uint8), "L")
    return img.resize((img.width * upscale, img.height * upscale),
                      Image.Resampling.NEAREST)


def render_panel(column_labels: list[str], grid: list[list[np.ndarray]],
                 upscale: int = 2, pad: int = 4) -> Image.Image:
    """Rows of aligned tiles with one caption per column.

    Each grid row must have one HxW (or 1xHxW) array per column; values
    are clipped to [0, 1] and mapped to 8-bit grayscale.
    """
    if not grid or any(len(row) != len(column_labels) for row in grid):
        raise ValueError("grid rows must match the column labels")
    tiles = [[_to_tile(a, upscale) for a in row] for row in grid]
    tw = max(t.width for row in tiles for t in row)
    th = max(t.height for row in tiles for t in row)
    header = 16
    width = pad + (tw + pad) * len(column_labels)
    height = header + pad + (th + pad) * len(tiles)
    out = Image.new("L", (width, height), 255)
    draw = ImageDraw.Draw(out)
    for j, label in enumerate(column_labels):
        draw.text((pad + (tw + pad) * j + 2, 3), label, fill=0)
    for i, row in enumerate(tiles):
        for j, tile in enumerate(row):
            out.paste(tile, (pad + (tw + pad) * j,
                             header + pad + (th + pad) * i))
    return out
