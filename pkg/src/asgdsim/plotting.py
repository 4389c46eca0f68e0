"""Seed aggregation and a minimal static SVG writer for convergence curves.

Aggregation order is fixed: resample each seed's step curve onto a shared
time grid, take median and quartiles across seeds per grid point, then
smooth. Smoothing is a centered moving average with truncated end windows;
index 0 always keeps its raw value. Plots are a convenience; the CSVs are
the contract.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

PALETTE = ("#1b6ca8", "#d1495b", "#66a182", "#8d6a9f", "#e0a458", "#3d3d3d")

GRID_POINTS = 256


def resample_step(times, values, grid) -> np.ndarray:
    """Previous-value interpolation; before the first record the curve sits
    at the first value (the squared gradient norm at the start iterate)."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    idx = np.searchsorted(times, grid, side="right") - 1
    idx = np.clip(idx, 0, len(values) - 1)
    return values[idx]


def aggregate_curves(curves, points: int = GRID_POINTS):
    """curves: list of (times, values). Returns (grid, median, q1, q3) over
    [0, min final time] so every seed covers the whole grid."""
    finals = [float(t[-1]) for t, _ in curves if len(t)]
    if not finals:
        raise ValueError("no non-empty curves to aggregate")
    grid = np.linspace(0.0, min(finals), points)
    stack = np.stack([resample_step(t, v, grid) for t, v in curves])
    median = np.median(stack, axis=0)
    q1 = np.percentile(stack, 25, axis=0)
    q3 = np.percentile(stack, 75, axis=0)
    return grid, median, q1, q3


def smooth(values, window: int) -> np.ndarray:
    """Centered moving average, endpoints truncated, index 0 kept raw."""
    values = np.asarray(values, dtype=float)
    if window <= 1 or len(values) < 2:
        return values.copy()
    half = window // 2
    out = np.empty_like(values)
    for i in range(len(values)):
        lo = max(0, i - half)
        hi = min(len(values), i + half + 1)
        out[i] = values[lo:hi].mean()
    out[0] = values[0]
    return out


def _format_tick(v: float) -> str:
    return f"{v:g}"


def _svg_header(width, height):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n')


def render_svg(series, path, width=720, height=480, x_label="virtual time",
               y_label="median grad norm^2 (IQR band)") -> None:
    """series: list of (label, grid, median, q1, q3); y is log-scaled."""
    ml, mr, mt, mb = 80, 24, 28, 56
    plot_w, plot_h = width - ml - mr, height - mt - mb
    x_max = max(float(g[-1]) for _, g, *_ in series)
    x_max = x_max if x_max > 0 else 1.0

    positive = [v for _, _, m, q1, q3 in series
                for v in np.concatenate([m, q1, q3]) if v > 0]
    floor = min(positive) / 10 if positive else 1e-12
    lo = math.floor(math.log10(floor))
    hi = math.ceil(math.log10(max(max(np.max(m), np.max(q3))
                                  for _, _, m, _, q3 in series) + floor))
    if hi <= lo:
        hi = lo + 1

    def X(t):
        return ml + (t / x_max) * plot_w

    def Y(v):
        u = (math.log10(max(v, floor)) - lo) / (hi - lo)
        return mt + (1.0 - u) * plot_h

    parts = [_svg_header(width, height)]
    # axes
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" '
                 f'stroke="black"/>\n')
    parts.append(f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" '
                 f'y2="{mt + plot_h}" stroke="black"/>\n')
    for i in range(5):
        t = x_max * i / 4
        x = X(t)
        parts.append(f'<line x1="{x:.2f}" y1="{mt + plot_h}" x2="{x:.2f}" '
                     f'y2="{mt + plot_h + 5}" stroke="black"/>\n')
        parts.append(f'<text x="{x:.2f}" y="{mt + plot_h + 20}" font-size="12" '
                     f'text-anchor="middle">{_format_tick(t)}</text>\n')
    for d in range(lo, hi + 1):
        y = Y(10.0 ** d)
        parts.append(f'<line x1="{ml - 5}" y1="{y:.2f}" x2="{ml}" y2="{y:.2f}" '
                     f'stroke="black"/>\n')
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.2f}" font-size="12" '
                     f'text-anchor="end">1e{d}</text>\n')
    parts.append(f'<text x="{ml + plot_w / 2:.2f}" y="{height - 14}" font-size="13" '
                 f'text-anchor="middle">{x_label}</text>\n')
    parts.append(f'<text x="20" y="{mt + plot_h / 2:.2f}" font-size="13" '
                 f'text-anchor="middle" transform="rotate(-90 20 {mt + plot_h / 2:.2f})">'
                 f'{y_label}</text>\n')

    for i, (label, grid, median, q1, q3) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        upper = " ".join(f"{X(t):.2f},{Y(v):.2f}" for t, v in zip(grid, q3))
        lower = " ".join(f"{X(t):.2f},{Y(v):.2f}"
                         for t, v in zip(grid[::-1], q1[::-1]))
        parts.append(f'<polygon points="{upper} {lower}" fill="{color}" '
                     f'fill-opacity="0.18" stroke="none"/>\n')
        pts = " ".join(f"{X(t):.2f},{Y(v):.2f}" for t, v in zip(grid, median))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.8"/>\n')
        ly = mt + 16 + 18 * i
        parts.append(f'<line x1="{ml + plot_w - 150}" y1="{ly}" '
                     f'x2="{ml + plot_w - 120}" y2="{ly}" stroke="{color}" '
                     f'stroke-width="2"/>\n')
        parts.append(f'<text x="{ml + plot_w - 112}" y="{ly + 4}" font-size="12">'
                     f'{label}</text>\n')
    parts.append("</svg>\n")
    Path(path).write_text("".join(parts))


def emit_plot(traces, smoothing_window: int, path) -> list[str]:
    """Group traces by method, aggregate across seeds, smooth, render.
    Returns notices for skipped (empty) traces."""
    groups: dict[str, list] = {}
    notices = []
    for trace in traces:
        if not trace.records:
            notices.append(f"skipped empty trace ({trace.meta.get('method')}, "
                           f"seed {trace.meta.get('seed')})")
            continue
        times = [r.virtual_time for r in trace.records]
        grads = [r.grad_norm_sq for r in trace.records]
        groups.setdefault(trace.meta.get("method", "run"), []).append((times, grads))
    series = []
    for method in sorted(groups):
        grid, median, q1, q3 = aggregate_curves(groups[method])
        series.append((
            method,
            grid,
            smooth(median, smoothing_window),
            smooth(q1, smoothing_window),
            smooth(q3, smoothing_window),
        ))
    if not series:
        notices.append("nothing to plot")
        return notices
    render_svg(series, path)
    return notices
