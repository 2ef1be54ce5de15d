"""Tiny self-contained SVG charts (line plot and histogram)."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

W, H, PAD = 480, 300, 40


def _frame(title: str, body: str, xlabel: str, ylabel: str) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">\n'
        f'<rect width="{W}" height="{H}" fill="white"/>\n'
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(title)}</text>\n'
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - 10}" y2="{H - PAD}" stroke="black"/>\n'
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{PAD}" y2="24" stroke="black"/>\n'
        f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-family="sans-serif" font-size="11">{escape(xlabel)}</text>\n'
        f'<text x="12" y="{H / 2}" font-family="sans-serif" font-size="11" '
        f'transform="rotate(-90 12 {H / 2})" text-anchor="middle">{escape(ylabel)}</text>\n'
        f"{body}</svg>\n"
    )


def _scale(v, lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def line_svg(x, y, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    x, y = np.asarray(x, float), np.asarray(y, float)
    keep = np.isfinite(y)
    x, y = x[keep], y[keep]
    if x.size == 0:
        return _frame(title, "", xlabel, ylabel)
    px = _scale(x, x.min(), x.max(), PAD, W - 10)
    py = _scale(y, y.min(), y.max(), H - PAD, 28)
    pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, py))
    body = f'<polyline fill="none" stroke="steelblue" stroke-width="1" points="{pts}"/>\n'
    body += (f'<text x="{PAD + 2}" y="34" font-family="sans-serif" font-size="10">max {y.max():.4g}</text>\n'
             f'<text x="{PAD + 2}" y="{H - PAD - 4}" font-family="sans-serif" font-size="10">min {y.min():.4g}</text>\n')
    return _frame(title, body, xlabel, ylabel)


def histogram_svg(values, bins: int = 30, title: str = "", xlabel: str = "", range_=None) -> str:
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return _frame(title, "", xlabel, "count")
    counts, edges = np.histogram(v, bins=bins, range=range_)
    top = max(counts.max(), 1)
    bw = (W - 10 - PAD) / bins
    body = []
    for k, c in enumerate(counts):
        h = (H - PAD - 28) * c / top
        body.append(f'<rect x="{PAD + k * bw:.1f}" y="{H - PAD - h:.1f}" width="{bw - 1:.1f}" height="{h:.1f}" '
                    f'fill="steelblue"/>\n')
    body.append(f'<text x="{PAD}" y="{H - PAD + 14}" font-family="sans-serif" font-size="10">{edges[0]:.3g}</text>\n')
    body.append(f'<text x="{W - 10}" y="{H - PAD + 14}" text-anchor="end" font-family="sans-serif" '
                f'font-size="10">{edges[-1]:.3g}</text>\n')
    return _frame(title, "".join(body), xlabel, "count")
