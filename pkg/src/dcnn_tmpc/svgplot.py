"""Minimal SVG line charts, no charting dependency.

Enough for trajectory and metric figures: axes with ticks, a handful of
colored polylines, and a legend. Output is deterministic text.
"""

from __future__ import annotations

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#7f7f7f", "#17becf")

_W, _H = 880, 480
_ML, _MR, _MT, _MB = 70, 20, 42, 52


def _ticks(lo, hi, n=6):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    raw = span / max(n - 1, 1)
    mag = 10.0 ** np.floor(np.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * mag
        if span / step <= n:
            break
    start = np.ceil(lo / step) * step
    vals = []
    v = start
    while v <= hi + 1e-12 * span:
        vals.append(0.0 if abs(v) < 1e-12 * span else v)
        v += step
    return vals


def line_chart(path, series, title="", xlabel="", ylabel=""):
    """Write an SVG polyline chart.

    series: iterable of dicts {"x": array, "y": array, "label": str}.
    """
    series = [dict(s) for s in series]
    if not series:
        raise ValueError("at least one series is required")
    xs = np.concatenate([np.asarray(s["x"], dtype=float) for s in series])
    ys = np.concatenate([np.asarray(s["y"], dtype=float) for s in series])
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = float(ys.min()), float(ys.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo -= pad
    y_hi += pad
    pw = _W - _ML - _MR
    ph = _H - _MT - _MB

    def tx(v):
        return _ML + (v - x_lo) / (x_hi - x_lo) * pw

    def ty(v):
        return _MT + ph - (v - y_lo) / (y_hi - y_lo) * ph

    out = []
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
               f'viewBox="0 0 {_W} {_H}" font-family="Helvetica,Arial,sans-serif">')
    out.append(f'<rect width="{_W}" height="{_H}" fill="white"/>')
    if title:
        out.append(f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" '
                   f'font-size="16">{title}</text>')
    # grid and ticks
    for v in _ticks(x_lo, x_hi):
        px = tx(v)
        out.append(f'<line x1="{px:.2f}" y1="{_MT}" x2="{px:.2f}" y2="{_MT + ph}" '
                   f'stroke="#e0e0e0" stroke-width="1"/>')
        out.append(f'<text x="{px:.2f}" y="{_MT + ph + 18}" text-anchor="middle" '
                   f'font-size="11">{v:g}</text>')
    for v in _ticks(y_lo, y_hi):
        py = ty(v)
        out.append(f'<line x1="{_ML}" y1="{py:.2f}" x2="{_ML + pw}" y2="{py:.2f}" '
                   f'stroke="#e0e0e0" stroke-width="1"/>')
        out.append(f'<text x="{_ML - 6}" y="{py + 4:.2f}" text-anchor="end" '
                   f'font-size="11">{v:g}</text>')
    out.append(f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" fill="none" '
               f'stroke="#333" stroke-width="1"/>')
    if xlabel:
        out.append(f'<text x="{_ML + pw / 2:.1f}" y="{_H - 14}" text-anchor="middle" '
                   f'font-size="13">{xlabel}</text>')
    if ylabel:
        out.append(f'<text x="18" y="{_MT + ph / 2:.1f}" text-anchor="middle" '
                   f'font-size="13" transform="rotate(-90 18 {_MT + ph / 2:.1f})">'
                   f'{ylabel}</text>')
    # polylines
    for k, s in enumerate(series):
        color = s.get("color", PALETTE[k % len(PALETTE)])
        x = np.asarray(s["x"], dtype=float)
        y = np.asarray(s["y"], dtype=float)
        pts = " ".join(f"{tx(a):.2f},{ty(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="1.6"/>')
    # legend
    lx = _ML + pw - 150
    ly = _MT + 10
    for k, s in enumerate(series):
        if not s.get("label"):
            continue
        color = s.get("color", PALETTE[k % len(PALETTE)])
        out.append(f'<line x1="{lx}" y1="{ly + 16 * k}" x2="{lx + 22}" '
                   f'y2="{ly + 16 * k}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 28}" y="{ly + 16 * k + 4}" font-size="12">'
                   f'{s["label"]}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
