"""Minimal SVG charts: ATE intervals by specification and AUC bars."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

SPEC_ORDER = ("a_diffmeans", "b_x_fe", "c1_m", "c2_m_x_fe")
SPEC_NAMES = {"a_diffmeans": "Diff-in-means", "b_x_fe": "X+FE", "c1_m": "M", "c2_m_x_fe": "M+X+FE"}
COLORS = {"a_diffmeans": "#7f7f7f", "b_x_fe": "#1f77b4", "c1_m": "#ff7f0e", "c2_m_x_fe": "#2ca02c"}


def _nice_range(lo, hi, pad=0.08):
    if not np.isfinite(lo) or not np.isfinite(hi):
        return -1.0, 1.0
    if hi - lo < 1e-9:
        lo, hi = lo - 1, hi + 1
    span = hi - lo
    return lo - pad * span, hi + pad * span


def _ticks(lo, hi, n=5):
    step = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(step))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= step), default=step)
    start = np.ceil(lo / step) * step
    return [round(t, 10) for t in np.arange(start, hi + 1e-9, step)]


class _Svg:
    def __init__(self, width, height):
        self.width, self.height = width, height
        self.parts = []

    def add(self, s):
        self.parts.append(s)

    def text(self, x, y, s, size=11, anchor="start", rotate=None, weight="normal"):
        tr = f' transform="rotate({rotate} {x:.1f} {y:.1f})"' if rotate is not None else ""
        self.add(f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" text-anchor="{anchor}" '
                 f'font-weight="{weight}" font-family="sans-serif"{tr}>{escape(str(s))}</text>')

    def line(self, x1, y1, x2, y2, color="#000", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
                 f'stroke="{color}" stroke-width="{width}"{d}/>')

    def rect(self, x, y, w, h, color):
        self.add(f'<rect x="{x:.1f}" y="{y:.1f}" width="{w:.1f}" height="{h:.1f}" fill="{color}"/>')

    def circle(self, x, y, r, color):
        self.add(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{r}" fill="{color}"/>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">')
        return "\n".join([head, f'<rect width="100%" height="100%" fill="white"/>'] + self.parts + ["</svg>"]) + "\n"


def _legend(svg, specs, x, y):
    for i, s in enumerate(specs):
        svg.rect(x + i * 120, y - 9, 10, 10, COLORS.get(s, "#333"))
        svg.text(x + i * 120 + 14, y, SPEC_NAMES.get(s, s), size=11)


def _groups(rows):
    keys = []
    for r in rows:
        k = (str(r["funder"]), str(r["sector"]))
        if k not in keys:
            keys.append(k)
    return keys


def ate_interval_chart(rows, title="ATE by specification") -> str:
    """Point estimates with 95% intervals, one row per funder x sector.

    ``rows`` are dicts with funder, sector, specification, ate, ci_low, ci_high.
    """
    groups = _groups(rows)
    specs = [s for s in SPEC_ORDER if any(r["specification"] == s for r in rows)]
    specs += sorted({r["specification"] for r in rows} - set(specs))
    band = 18 * max(len(specs), 1) + 14
    left, right, top = 190, 30, 56
    width = 760
    height = top + band * max(len(groups), 1) + 50
    svg = _Svg(width, height)
    svg.text(width / 2, 22, title, size=14, anchor="middle", weight="bold")
    _legend(svg, specs, left, 42)
    lows = [float(r["ci_low"]) for r in rows] + [0.0]
    highs = [float(r["ci_high"]) for r in rows] + [0.0]
    lo, hi = _nice_range(min(lows), max(highs))
    plot_w = width - left - right

    def sx(v):
        return left + (float(v) - lo) / (hi - lo) * plot_w

    bottom = top + band * len(groups)
    for t in _ticks(lo, hi):
        svg.line(sx(t), top, sx(t), bottom, "#e5e5e5")
        svg.text(sx(t), bottom + 16, f"{t:g}", size=10, anchor="middle")
    svg.line(sx(0), top, sx(0), bottom, "#444", dash="4,3")
    svg.text(left + plot_w / 2, bottom + 36, "ATE (IWI points)", size=11, anchor="middle")
    for g, (funder, sector) in enumerate(groups):
        y0 = top + g * band
        svg.text(left - 8, y0 + band / 2 + 4, f"{funder} / {sector}", size=11, anchor="end")
        for j, s in enumerate(specs):
            match = [r for r in rows if (str(r["funder"]), str(r["sector"])) == (funder, sector)
                     and r["specification"] == s]
            if not match:
                continue
            r = match[0]
            y = y0 + 10 + j * 18
            c = COLORS.get(s, "#333")
            svg.line(sx(r["ci_low"]), y, sx(r["ci_high"]), y, c, 2)
            svg.circle(sx(r["ate"]), y, 4, c)
    return svg.render()


def auc_bar_chart(rows, title="Out-of-sample AUC by specification") -> str:
    """Grouped bars of AUC per funder x sector; ``rows`` hold funder, sector, specification, auc."""
    groups = _groups(rows)
    specs = [s for s in SPEC_ORDER if any(r["specification"] == s for r in rows)]
    specs += sorted({r["specification"] for r in rows} - set(specs))
    bar = 22
    gap = 26
    left, top, bottom_pad = 60, 56, 70
    group_w = bar * max(len(specs), 1) + gap
    width = max(420, left + 30 + group_w * max(len(groups), 1))
    height = 380
    plot_h = height - top - bottom_pad
    svg = _Svg(width, height)
    svg.text(width / 2, 22, title, size=14, anchor="middle", weight="bold")
    _legend(svg, specs, left, 42)
    lo, hi = 0.4, 1.0

    def sy(v):
        return top + (hi - float(v)) / (hi - lo) * plot_h

    for t in np.arange(0.4, 1.0001, 0.1):
        svg.line(left, sy(t), width - 20, sy(t), "#e5e5e5")
        svg.text(left - 6, sy(t) + 4, f"{t:.1f}", size=10, anchor="end")
    svg.line(left, sy(0.5), width - 20, sy(0.5), "#444", dash="4,3")
    svg.text(16, top + plot_h / 2, "AUC", size=11, anchor="middle", rotate=-90)
    for g, (funder, sector) in enumerate(groups):
        x0 = left + 14 + g * group_w
        for j, s in enumerate(specs):
            match = [r for r in rows if (str(r["funder"]), str(r["sector"])) == (funder, sector)
                     and r["specification"] == s]
            if not match:
                continue
            v = min(max(float(match[0]["auc"]), lo), hi)
            svg.rect(x0 + j * bar, sy(v), bar - 3, sy(lo) - sy(v), COLORS.get(s, "#333"))
        svg.text(x0 + bar * len(specs) / 2, top + plot_h + 16, f"{funder}/{sector}", size=10,
                 anchor="middle")
    return svg.render()
