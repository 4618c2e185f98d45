"""Line charts of report metrics.

:func:`render_svg` is a fixed-template SVG 1.1 writer with no dependencies;
:func:`render_png` draws the same series with matplotlib when it is installed.
"""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 170, 30, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def collect_series(rows: Iterable[dict], metric: str) -> dict:
    """Group report rows of one metric into ``{(experiment, layer): [(step, value), ...]}``."""
    series = defaultdict(list)
    for r in rows:
        if r["metric"] == metric:
            series[(r["experiment"], r["layer"])].append((r["step"], r["value"]))
    if not series:
        raise ValueError(f"no rows with metric {metric!r}")
    return {key: sorted(pts) for key, pts in sorted(series.items())}


def _label(key) -> str:
    exp, layer = key
    return f"{exp} model" if layer < 0 else f"{exp} layer {layer}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt_tick(v: float) -> str:
    return f"{v:.3g}"


def render_svg(series: dict, path, metric: str, logy: bool = False) -> None:
    """Write one polyline per series; ``logy`` plots log10 of the values.

    Non-positive values cannot appear on a log axis and are skipped.
    """
    pts = {}
    for key, xy in series.items():
        kept = [(x, y) for x, y in xy if math.isfinite(y) and (y > 0 or not logy)]
        if kept:
            pts[key] = [(x, math.log10(y) if logy else y) for x, y in kept]
    if not pts:
        raise ValueError("nothing to plot (all values non-positive on a log axis?)")
    xs = [x for xy in pts.values() for x, _ in xy]
    ys = [y for xy in pts.values() for _, y in xy]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN_T + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        X = sx(t)
        out.append(f'<line x1="{X:.2f}" y1="{MARGIN_T + ph}" x2="{X:.2f}" y2="{MARGIN_T + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{X:.2f}" y="{MARGIN_T + ph + 16}" text-anchor="middle">{_fmt_tick(t)}</text>')
    for t in _ticks(y0, y1):
        Y = sy(t)
        label = _fmt_tick(10 ** t) if logy else _fmt_tick(t)
        out.append(f'<line x1="{MARGIN_L - 4}" y1="{Y:.2f}" x2="{MARGIN_L}" y2="{Y:.2f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN_L - 6}" y="{Y + 4:.2f}" text-anchor="end">{label}</text>')
    ylabel = f"{metric} (log scale)" if logy else metric
    out.append(f'<text x="{MARGIN_L + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">step</text>')
    out.append(f'<text x="16" y="{MARGIN_T + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN_T + ph / 2:.2f})">{_escape(ylabel)}</text>')
    for i, (key, xy) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in xy)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}">'
                   f'<title>{_escape(_label(key))}</title></polyline>')
        ly = MARGIN_T + 10 + 16 * i
        lx = WIDTH - MARGIN_R + 10
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 22}" y="{ly + 4}">{_escape(_label(key))}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_png(series: dict, path, metric: str, logy: bool = False) -> None:
    """Matplotlib rendering of the same series (raises ImportError without matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for i, (key, xy) in enumerate(series.items()):
        xs = [x for x, y in xy if y > 0 or not logy]
        ys = [y for x, y in xy if y > 0 or not logy]
        ax.plot(xs, ys, color=PALETTE[i % len(PALETTE)], lw=1.5, label=_label(key))
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
