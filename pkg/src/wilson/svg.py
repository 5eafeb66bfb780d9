"""Minimal SVG rendering of heatmaps, scatter plots, line curves and bars.

For eyeballing results only; the CSV files next to each SVG are the data.
"""

from __future__ import annotations

from html import escape
from typing import Sequence

import numpy as np

W, H, PAD = 360, 280, 40


def _doc(body: list[str], title: str) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="10">'
    t = f'<text x="{W / 2}" y="14" text-anchor="middle" font-size="12">{escape(title)}</text>'
    return "\n".join([head, t, *body, "</svg>"]) + "\n"


def _scale(v, lo, hi, a, b):
    span = (hi - lo) or 1.0
    return a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def _axes() -> list[str]:
    return [
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD / 2}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD / 2 + 10}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
    ]


def heatmap(matrix, labels: Sequence[str] | None = None, title: str = "") -> str:
    m = np.asarray(matrix, dtype=float)
    n_r, n_c = m.shape
    cw, ch = (W - 2 * PAD) / n_c, (H - 2 * PAD) / n_r
    hi = m.max() if m.size and m.max() > 0 else 1.0
    body = []
    for r in range(n_r):
        for c in range(n_c):
            shade = int(255 - 215 * m[r, c] / hi)
            body.append(
                f'<rect x="{PAD + c * cw:.1f}" y="{PAD + r * ch:.1f}" width="{cw:.1f}" height="{ch:.1f}" '
                f'fill="rgb(255,{shade},{shade})" stroke="white"><title>{m[r, c]:.4g}</title></rect>'
            )
    if labels is not None:
        for k, lab in enumerate(labels):
            body.append(f'<text x="{PAD - 2}" y="{PAD + (k + 0.5) * ch:.1f}" text-anchor="end">{escape(lab)}</text>')
    return _doc(body, title)


def scatter(x, y, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    x, y = np.asarray(x, float), np.asarray(y, float)
    px = _scale(x, x.min(), x.max(), PAD, W - PAD)
    py = _scale(y, y.min(), y.max(), H - PAD, PAD)
    body = _axes() + [f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="steelblue"/>' for a, b in zip(px, py)]
    body += [
        f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="10" y="{H / 2}" transform="rotate(-90 10 {H / 2})" text-anchor="middle">{escape(ylabel)}</text>',
    ]
    return _doc(body, title)


def curve(x, ys: dict[str, Sequence[float]], title: str = "", diagonal: bool = False) -> str:
    x = np.asarray(x, float)
    all_y = np.concatenate([np.asarray(v, float) for v in ys.values()])
    lo, hi = (0.0, 1.0) if diagonal else (all_y.min(), all_y.max())
    body = _axes()
    if diagonal:
        body.append(f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{PAD}" stroke="gray" stroke-dasharray="4"/>')
    colors = ["steelblue", "darkorange", "seagreen", "crimson", "purple", "gray"]
    for k, (name, y) in enumerate(ys.items()):
        px = _scale(x, x.min(), x.max(), PAD, W - PAD)
        py = _scale(y, lo, hi, H - PAD, PAD)
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, py))
        col = colors[k % len(colors)]
        body.append(f'<polyline points="{pts}" fill="none" stroke="{col}"/>')
        body.append(f'<text x="{W - PAD}" y="{PAD + 12 * k}" fill="{col}" text-anchor="end">{escape(name)}</text>')
    return _doc(body, title)


def bars(values: dict[str, float], title: str = "") -> str:
    names = list(values)
    v = np.array([values[n] for n in names], float)
    hi = v.max() if len(v) and v.max() > 0 else 1.0
    bw = (W - 2 * PAD) / max(1, len(names))
    body = _axes()
    for k, (name, val) in enumerate(zip(names, v)):
        h = (H - 2 * PAD) * val / hi
        x = PAD + k * bw + bw * 0.15
        body.append(f'<rect x="{x:.1f}" y="{H - PAD - h:.1f}" width="{bw * 0.7:.1f}" height="{h:.1f}" fill="steelblue"/>')
        body.append(f'<text x="{x + bw * 0.35:.1f}" y="{H - PAD + 12}" text-anchor="middle">{escape(name)}</text>')
        body.append(f'<text x="{x + bw * 0.35:.1f}" y="{H - PAD - h - 3:.1f}" text-anchor="middle">{val:.3g}</text>')
    return _doc(body, title)
