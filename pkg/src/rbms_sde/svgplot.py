"""
Minimal SVG line plots and heat maps, enough to eyeball results without a
plotting stack.  Output is deterministic for identical inputs.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

W, H = 480, 360
L, R, T, B = 60, 20, 30, 45
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def _fmt(v):
    return f"{v:.4g}"


def _frame(title, xlabel, ylabel, xr, yr):
    x0, x1 = xr
    y0, y1 = yr
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
           f'<rect x="{L}" y="{T}" width="{W - L - R}" height="{H - T - B}" fill="none" stroke="black"/>']
    for v in np.linspace(x0, x1, 5):
        px = L + (v - x0) / (x1 - x0) * (W - L - R)
        out.append(f'<text x="{px:.1f}" y="{H - B + 14}" text-anchor="middle">{_fmt(v)}</text>')
    for v in np.linspace(y0, y1, 5):
        py = H - B - (v - y0) / (y1 - y0) * (H - T - B)
        out.append(f'<text x="{L - 4}" y="{py + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
    return out


def _span(a):
    lo, hi = float(np.min(a)), float(np.max(a))
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def line_plot(path, series, title="", xlabel="", ylabel=""):
    """``series`` maps a label to ``(x, y)``; NaNs break nothing but are skipped."""
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    xr, yr = _span(xs[np.isfinite(xs)]), _span(ys[np.isfinite(ys)])
    out = _frame(title, xlabel, ylabel, xr, yr)
    for j, (name, (x, y)) in enumerate(series.items()):
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.isfinite(x) & np.isfinite(y)
        px = L + (x[ok] - xr[0]) / (xr[1] - xr[0]) * (W - L - R)
        py = H - B - (y[ok] - yr[0]) / (yr[1] - yr[0]) * (H - T - B)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        c = COLORS[j % len(COLORS)]
        out.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        out.append(f'<text x="{W - R - 4}" y="{T + 14 + 13 * j}" text-anchor="end" fill="{c}">{escape(name)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def heatmap(path, values, extent, title="", xlabel="", ylabel=""):
    """Heat map of ``values[i, j]`` with ``i`` along x and ``j`` along y."""
    v = np.asarray(values, float)
    nx, ny = v.shape
    lo, hi = _span(v[np.isfinite(v)]) if np.isfinite(v).any() else (0.0, 1.0)
    out = _frame(title, xlabel, ylabel, extent[0], extent[1])
    cw = (W - L - R) / nx
    ch = (H - T - B) / ny
    for i in range(nx):
        for j in range(ny):
            s = (v[i, j] - lo) / (hi - lo) if np.isfinite(v[i, j]) else 0.0
            r, g, b = int(255 * s), int(255 * (1 - abs(2 * s - 1))), int(255 * (1 - s))
            out.append(f'<rect x="{L + i * cw:.2f}" y="{H - B - (j + 1) * ch:.2f}" '
                       f'width="{cw + 0.05:.2f}" height="{ch + 0.05:.2f}" fill="rgb({r},{g},{b})"/>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
