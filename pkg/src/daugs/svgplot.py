"""Tiny deterministic SVG charts for reports. No plotting libraries: output
bytes depend only on the data, so golden files diff cleanly."""

from __future__ import annotations

import math
from pathlib import Path

W, H = 640, 480
MARGIN = 60
COLORS = ("#1f6fb2", "#d95f02", "#2ca02c", "#9467bd", "#8c564b", "#555555")


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _axis_range(values) -> tuple[float, float]:
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if lo == hi:
        lo -= 0.5
        hi += 0.5
    pad = 0.06 * (hi - lo)
    return lo - pad, hi + pad


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W/2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
            f'<text x="{W/2}" y="{H-10}" text-anchor="middle" font-size="12">{xlabel}</text>',
            f'<text x="16" y="{H/2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {H/2})">{ylabel}</text>',
            f'<rect x="{MARGIN}" y="{MARGIN}" width="{W-2*MARGIN}" height="{H-2*MARGIN}" '
            f'fill="none" stroke="#333"/>',
        ]

    def scale(self, xr, yr):
        x0, x1 = xr
        y0, y1 = yr

        def sx(v):
            return MARGIN + (v - x0) / (x1 - x0) * (W - 2 * MARGIN)

        def sy(v):
            return H - MARGIN - (v - y0) / (y1 - y0) * (H - 2 * MARGIN)

        return sx, sy

    def ticks(self, xr, yr, sx, sy, n=5):
        x0, x1 = xr
        y0, y1 = yr
        for i in range(n + 1):
            xv = x0 + (x1 - x0) * i / n
            yv = y0 + (y1 - y0) * i / n
            self.parts.append(
                f'<text x="{_fmt(sx(xv))}" y="{H-MARGIN+16}" text-anchor="middle" '
                f'font-size="10">{_fmt(xv)}</text>'
            )
            self.parts.append(
                f'<text x="{MARGIN-6}" y="{_fmt(sy(yv)+3)}" text-anchor="end" '
                f'font-size="10">{_fmt(yv)}</text>'
            )

    def write(self, path):
        self.parts.append("</svg>")
        Path(path).write_text("\n".join(self.parts), encoding="ascii")


def line_chart(path, xs, series: dict, title="", xlabel="", ylabel="", errbars=None):
    """Polyline per named series; optional symmetric error bars per point."""
    all_y = [y for ys in series.values() for y in ys]
    if errbars:
        for name, errs in errbars.items():
            all_y += [y + e for y, e in zip(series[name], errs)]
            all_y += [y - e for y, e in zip(series[name], errs)]
    c = _Canvas(title, xlabel, ylabel)
    xr = _axis_range(xs)
    yr = _axis_range(all_y)
    sx, sy = c.scale(xr, yr)
    c.ticks(xr, yr, sx, sy)
    for k, (name, ys) in enumerate(sorted(series.items())):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        c.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        if errbars and name in errbars:
            for x, y, e in zip(xs, ys, errbars[name]):
                c.parts.append(
                    f'<line x1="{_fmt(sx(x))}" y1="{_fmt(sy(y-e))}" x2="{_fmt(sx(x))}" '
                    f'y2="{_fmt(sy(y+e))}" stroke="{color}" stroke-width="1"/>'
                )
        c.parts.append(
            f'<text x="{W-MARGIN-8}" y="{MARGIN+16+14*k}" text-anchor="end" font-size="11" '
            f'fill="{color}">{name}</text>'
        )
    c.write(path)


def bar_chart(path, labels, groups: dict, title="", xlabel="", ylabel="", errors=None):
    """Grouped bars: one group color per dict key, one cluster per label."""
    all_v = [v for vs in groups.values() for v in vs]
    if errors:
        all_v += [v + e for vs, es in zip(groups.values(), errors.values()) for v, e in zip(vs, es)]
    c = _Canvas(title, xlabel, ylabel)
    yr = _axis_range([0.0] + list(all_v))
    n_lab = len(labels)
    n_grp = len(groups)
    sx, sy = c.scale((0.0, float(n_lab)), yr)
    c.ticks((0.0, float(n_lab)), yr, sx, sy)
    width = 0.8 / n_grp
    for k, (name, vals) in enumerate(sorted(groups.items())):
        color = COLORS[k % len(COLORS)]
        for i, v in enumerate(vals):
            x_left = i + 0.1 + k * width
            c.parts.append(
                f'<rect x="{_fmt(sx(x_left))}" y="{_fmt(sy(max(v, 0.0)))}" '
                f'width="{_fmt(sx(width) - sx(0))}" '
                f'height="{_fmt(abs(sy(v) - sy(0.0)))}" fill="{color}"/>'
            )
            if errors and name in errors:
                e = errors[name][i]
                xc = x_left + width / 2
                c.parts.append(
                    f'<line x1="{_fmt(sx(xc))}" y1="{_fmt(sy(v-e))}" x2="{_fmt(sx(xc))}" '
                    f'y2="{_fmt(sy(v+e))}" stroke="#222" stroke-width="1"/>'
                )
        c.parts.append(
            f'<text x="{W-MARGIN-8}" y="{MARGIN+16+14*k}" text-anchor="end" font-size="11" '
            f'fill="{color}">{name}</text>'
        )
    for i, lab in enumerate(labels):
        c.parts.append(
            f'<text x="{_fmt(sx(i+0.5))}" y="{H-MARGIN+30}" text-anchor="middle" '
            f'font-size="11">{lab}</text>'
        )
    c.write(path)


def scatter(path, x, y, title="", xlabel="", ylabel="", identity=False, fit=None):
    c = _Canvas(title, xlabel, ylabel)
    xr = _axis_range(list(x) + (list(y) if identity else []))
    yr = _axis_range(list(y) + (list(x) if identity else []))
    sx, sy = c.scale(xr, yr)
    c.ticks(xr, yr, sx, sy)
    if identity:
        lo = max(xr[0], yr[0])
        hi = min(xr[1], yr[1])
        c.parts.append(
            f'<line x1="{_fmt(sx(lo))}" y1="{_fmt(sy(lo))}" x2="{_fmt(sx(hi))}" '
            f'y2="{_fmt(sy(hi))}" stroke="#aaa" stroke-dasharray="4 3"/>'
        )
    if fit is not None:
        slope, intercept = fit
        c.parts.append(
            f'<line x1="{_fmt(sx(xr[0]))}" y1="{_fmt(sy(slope*xr[0]+intercept))}" '
            f'x2="{_fmt(sx(xr[1]))}" y2="{_fmt(sy(slope*xr[1]+intercept))}" '
            f'stroke="{COLORS[1]}" stroke-width="1.5"/>'
        )
    for xv, yv in zip(x, y):
        c.parts.append(
            f'<circle cx="{_fmt(sx(xv))}" cy="{_fmt(sy(yv))}" r="3" fill="{COLORS[0]}" '
            f'fill-opacity="0.7"/>'
        )
    c.write(path)


def bland_altman(path, reference, measured, title="", units=""):
    ref = list(reference)
    mea = list(measured)
    means = [(a + b) / 2 for a, b in zip(ref, mea)]
    diffs = [b - a for a, b in zip(ref, mea)]
    n = len(diffs)
    bias = sum(diffs) / n
    sd = math.sqrt(sum((d - bias) ** 2 for d in diffs) / (n - 1)) if n > 1 else 0.0
    c = _Canvas(title, f"mean {units}", f"difference {units}")
    xr = _axis_range(means)
    yr = _axis_range(diffs + [bias + 1.96 * sd, bias - 1.96 * sd])
    sx, sy = c.scale(xr, yr)
    c.ticks(xr, yr, sx, sy)
    for level, dash in ((bias, ""), (bias + 1.96 * sd, "4 3"), (bias - 1.96 * sd, "4 3")):
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        c.parts.append(
            f'<line x1="{_fmt(sx(xr[0]))}" y1="{_fmt(sy(level))}" x2="{_fmt(sx(xr[1]))}" '
            f'y2="{_fmt(sy(level))}" stroke="#888"{dash_attr}/>'
        )
    for xv, yv in zip(means, diffs):
        c.parts.append(
            f'<circle cx="{_fmt(sx(xv))}" cy="{_fmt(sy(yv))}" r="3" fill="{COLORS[0]}" '
            f'fill-opacity="0.7"/>'
        )
    c.write(path)


def histogram(path, values, bins=20, title="", xlabel="", highlight=None):
    vals = sorted(v for v in values if math.isfinite(v))
    if not vals:
        vals = [0.0]
    lo, hi = vals[0], vals[-1]
    if lo == hi:
        lo -= 0.5
        hi += 0.5
    width = (hi - lo) / bins
    counts = [0] * bins
    for v in vals:
        idx = min(int((v - lo) / width), bins - 1)
        counts[idx] += 1
    c = _Canvas(title, xlabel, "count")
    yr = _axis_range([0.0] + [float(max(counts))])
    sx, sy = c.scale((lo, hi), yr)
    c.ticks((lo, hi), yr, sx, sy)
    for i, n in enumerate(counts):
        x0 = lo + i * width
        c.parts.append(
            f'<rect x="{_fmt(sx(x0))}" y="{_fmt(sy(float(n)))}" '
            f'width="{_fmt(sx(lo+width)-sx(lo))}" height="{_fmt(sy(0.0)-sy(float(n)))}" '
            f'fill="{COLORS[0]}" stroke="white" stroke-width="0.5"/>'
        )
    if highlight is not None and math.isfinite(highlight):
        c.parts.append(
            f'<line x1="{_fmt(sx(highlight))}" y1="{_fmt(sy(yr[1]))}" '
            f'x2="{_fmt(sx(highlight))}" y2="{_fmt(sy(0.0))}" stroke="{COLORS[1]}" '
            f'stroke-width="2"/>'
        )
    c.write(path)
