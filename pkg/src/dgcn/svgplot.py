"""Minimal dependency-free SVG line plots for run reports.

Only what the report layer needs: multiple labeled series, optional
shaded mean/std bands, linear or log-10 y axis. Output is deterministic
for identical inputs.
"""

from __future__ import annotations

import math

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
            "#17becf", "#7f7f7f")

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 60, 20, 36, 46


def _ticks(lo, hi, count=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    for mult in (1, 2, 5, 10):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = math.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-12 * abs(hi):
        ticks.append(v)
        v += step
    return ticks


def _fmt(v):
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.1e}"
    return f"{v:g}"


def line_plot(path, series, *, title="", xlabel="", ylabel="", ylog=False):
    """Write an SVG line plot.

    ``series`` is a list of dicts with keys ``label``, ``x``, ``y`` and an
    optional ``band`` pair of (lower, upper) arrays. Non-positive values are
    dropped when ``ylog`` is set.
    """
    pts = []
    for s in series:
        for x, y in zip(s["x"], s["y"]):
            if y is None or (ylog and y <= 0) or not math.isfinite(y):
                continue
            pts.append((x, math.log10(y) if ylog else y))
    if not pts:
        raise ValueError("nothing to plot")
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1
    pad = 0.05 * (y_hi - y_lo)
    y_lo -= pad
    y_hi += pad

    def sx(x):
        return _ML + (x - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

    def sy(y):
        yy = math.log10(y) if ylog else y
        return _H - _MB - (yy - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>']
    if title:
        out.append(f'<text x="{_W / 2}" y="20" text-anchor="middle" '
                   f'font-size="14">{title}</text>')

    # axes and grid
    for tv in _ticks(x_lo, x_hi):
        px = sx(tv)
        out.append(f'<line x1="{px:.1f}" y1="{_MT}" x2="{px:.1f}" y2="{_H - _MB}" '
                   f'stroke="#dddddd"/>')
        out.append(f'<text x="{px:.1f}" y="{_H - _MB + 16}" '
                   f'text-anchor="middle">{_fmt(tv)}</text>')
    for tv in _ticks(y_lo, y_hi):
        py = _H - _MB - (tv - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)
        label = _fmt(10 ** tv) if ylog else _fmt(tv)
        out.append(f'<line x1="{_ML}" y1="{py:.1f}" x2="{_W - _MR}" y2="{py:.1f}" '
                   f'stroke="#dddddd"/>')
        out.append(f'<text x="{_ML - 6}" y="{py + 4:.1f}" text-anchor="end">{label}</text>')
    out.append(f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
               f'height="{_H - _MT - _MB}" fill="none" stroke="black"/>')
    if xlabel:
        out.append(f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle">{xlabel}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{_H / 2}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {_H / 2})">{ylabel}</text>')

    for idx, s in enumerate(series):
        color = _PALETTE[idx % len(_PALETTE)]
        band = s.get("band")
        if band is not None:
            poly = []
            for x, y in zip(s["x"], band[1]):
                if y is not None and math.isfinite(y) and not (ylog and y <= 0):
                    poly.append((sx(x), sy(y)))
            back = []
            for x, y in zip(s["x"], band[0]):
                if y is not None and math.isfinite(y) and not (ylog and y <= 0):
                    back.append((sx(x), sy(y)))
            if poly and back:
                path_pts = " ".join(f"{px:.1f},{py:.1f}" for px, py in poly + back[::-1])
                out.append(f'<polygon points="{path_pts}" fill="{color}" '
                           f'fill-opacity="0.15" stroke="none"/>')
        coords = [(sx(x), sy(y)) for x, y in zip(s["x"], s["y"])
                  if y is not None and math.isfinite(y) and not (ylog and y <= 0)]
        if not coords:
            continue
        pts_str = " ".join(f"{px:.1f},{py:.1f}" for px, py in coords)
        out.append(f'<polyline points="{pts_str}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5"/>')
        ly = _MT + 16 + 16 * idx
        out.append(f'<line x1="{_W - _MR - 130}" y1="{ly - 4}" x2="{_W - _MR - 106}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_W - _MR - 100}" y="{ly}">{s["label"]}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
