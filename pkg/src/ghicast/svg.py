"""Minimal deterministic SVG line charts (forecasts, Murphy curves, densities)."""

from __future__ import annotations

from html import escape
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.stats import gaussian_kde

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
W, H = 720, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 50


def _fmt(v):
    return f"{v:.2f}"


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def line_chart(series: Mapping[str, tuple], path, title="", xlabel="", ylabel="") -> Path:
    """Write one polyline per named ``(x, y)`` pair."""
    xs = [np.asarray(x, float) for x, _ in series.values()]
    ys = [np.asarray(y, float) for _, y in series.values()]
    finite = [v[np.isfinite(v)] for v in ys]
    allx = np.concatenate(xs) if xs else np.zeros(1)
    ally = np.concatenate(finite) if finite else np.zeros(1)
    x0, x1 = (float(allx.min()), float(allx.max())) if allx.size else (0.0, 1.0)
    y0, y1 = (float(ally.min()), float(ally.max())) if ally.size else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    sx = lambda v: LEFT + (v - x0) / (x1 - x0) * pw
    sy = lambda v: TOP + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
           f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{_fmt(sx(t))}" y="{H - BOTTOM + 16}" text-anchor="middle" font-size="11">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{LEFT - 6}" y="{_fmt(sy(t) + 4)}" text-anchor="end" font-size="11">{t:.4g}</text>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {TOP + ph / 2})">{escape(ylabel)}</text>')
    for i, (name, x, y) in enumerate(zip(series, xs, ys)):
        color = PALETTE[i % len(PALETTE)]
        ok = np.isfinite(y)
        pts = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x[ok], y[ok]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = TOP + 14 + 18 * i
        out.append(f'<line x1="{W - RIGHT + 10}" y1="{ly}" x2="{W - RIGHT + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - RIGHT + 35}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def density_chart(samples: Mapping[str, np.ndarray], path, title="Density", points=200) -> Path:
    """Gaussian kernel density overlays with Silverman's bandwidth."""
    vals = np.concatenate([np.asarray(v, float) for v in samples.values()])
    grid = np.linspace(vals.min(), vals.max(), points)
    series = {}
    for name, v in samples.items():
        v = np.asarray(v, float)
        if len(v) < 2 or np.std(v) == 0:
            continue
        series[name] = (grid, gaussian_kde(v, bw_method="silverman")(grid))
    return line_chart(series, path, title, "GHI (W/m2)", "density")
