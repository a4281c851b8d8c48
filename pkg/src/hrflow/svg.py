"""Tiny deterministic SVG writer for line charts, histogram overlays and scatter plots.

Coordinates are printed with fixed precision and no timestamps, so identical
inputs give identical files.
"""
from __future__ import annotations

import math
from html import escape

import numpy as np

__all__ = ["line_chart", "histogram_overlay", "scatter"]

W, H = 640, 420
L, R, T, B = 70, 150, 40, 55
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Frame:
    def __init__(self, xlim, ylim, log_x=False):
        self.log_x = log_x
        x0, x1 = (math.log10(v) for v in xlim) if log_x else xlim
        if x1 <= x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        y0, y1 = ylim
        if y1 <= y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        self.x0, self.x1, self.y0, self.y1 = x0, x1, y0, y1

    def px(self, x):
        x = math.log10(x) if self.log_x else x
        return L + (x - self.x0) / (self.x1 - self.x0) * (W - L - R)

    def py(self, y):
        return H - B - (y - self.y0) / (self.y1 - self.y0) * (H - T - B)


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def _axes(fr: _Frame, title, xlabel, ylabel, x_ticks=None):
    out = [
        f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
        f'<text x="{(L + W - R) / 2:.1f}" y="{T - 15}" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<text x="{(L + W - R) / 2:.1f}" y="{H - 12}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>',
        f'<text x="16" y="{(T + H - B) / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {(T + H - B) / 2:.1f})">{escape(ylabel)}</text>',
    ]
    if x_ticks is None:
        lo, hi = fr.x0, fr.x1
        x_ticks = [10**v for v in _ticks(lo, hi)] if fr.log_x else _ticks(lo, hi)
    for x in x_ticks:
        px = fr.px(x)
        out.append(f'<line x1="{_f(px)}" y1="{H - B}" x2="{_f(px)}" y2="{H - B + 5}" stroke="black"/>')
        out.append(f'<text x="{_f(px)}" y="{H - B + 19}" text-anchor="middle" font-size="11">{x:.3g}</text>')
    for y in _ticks(fr.y0, fr.y1):
        py = fr.py(y)
        out.append(f'<line x1="{L - 5}" y1="{_f(py)}" x2="{L}" y2="{_f(py)}" stroke="black"/>')
        out.append(f'<text x="{L - 8}" y="{_f(py + 4)}" text-anchor="end" font-size="11">{y:.3g}</text>')
    return out


def _legend(names):
    out = []
    for i, name in enumerate(names):
        y = T + 18 * i + 8
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{W - R + 12}" y="{y - 8}" width="12" height="10" fill="{c}"/>')
        out.append(f'<text x="{W - R + 30}" y="{y + 1}" font-size="12">{escape(str(name))}</text>')
    return out


def _doc(body) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}">\n<rect width="{W}" height="{H}" fill="white"/>')
    return head + "\n" + "\n".join(body) + "\n</svg>\n"


def line_chart(series: dict, title="", xlabel="", ylabel="", log_x=False) -> str:
    """``series`` maps a label to ``(xs, ys)``."""
    xs = np.concatenate([np.asarray(v[0], float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], float) for v in series.values()])
    if xs.size == 0:
        raise ValueError("nothing to plot")
    fr = _Frame((xs.min(), xs.max()), (0.0, float(ys.max()) * 1.05), log_x)
    ticks = sorted(set(xs.tolist())) if len(set(xs.tolist())) <= 8 else None
    body = _axes(fr, title, xlabel, ylabel, ticks)
    for i, (name, (x, y)) in enumerate(series.items()):
        c = PALETTE[i % len(PALETTE)]
        order = np.argsort(np.asarray(x, float), kind="stable")
        pts = " ".join(f"{_f(fr.px(float(x[j])))},{_f(fr.py(float(y[j])))}" for j in order)
        body.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="2"/>')
        for j in order:
            body.append(f'<circle cx="{_f(fr.px(float(x[j])))}" cy="{_f(fr.py(float(y[j])))}" r="3" fill="{c}"/>')
    return _doc(body + _legend(series))


def histogram_overlay(hists: dict, title="", xlabel="", ylabel="density") -> str:
    """``hists`` maps a label to ``(edges, heights)``; drawn as stepped outlines."""
    lo = min(float(e[0]) for e, _ in hists.values())
    hi = max(float(e[-1]) for e, _ in hists.values())
    top = max(float(np.max(h)) for _, h in hists.values())
    fr = _Frame((lo, hi), (0.0, top * 1.05))
    body = _axes(fr, title, xlabel, ylabel)
    for i, (name, (edges, heights)) in enumerate(hists.items()):
        c = PALETTE[i % len(PALETTE)]
        pts = [f"{_f(fr.px(float(edges[0])))},{_f(fr.py(0.0))}"]
        for k, h in enumerate(heights):
            pts.append(f"{_f(fr.px(float(edges[k])))},{_f(fr.py(float(h)))}")
            pts.append(f"{_f(fr.px(float(edges[k + 1])))},{_f(fr.py(float(h)))}")
        pts.append(f"{_f(fr.px(float(edges[-1])))},{_f(fr.py(0.0))}")
        body.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="{c}" stroke-width="1.6"/>')
    return _doc(body + _legend(hists))


def scatter(groups: dict, title="", xlabel="x", ylabel="y", max_points=3000) -> str:
    """``groups`` maps a label to an ``(n, 2)`` array; the first ``max_points`` rows are drawn."""
    allp = np.concatenate([np.asarray(p, float)[:max_points] for p in groups.values()])
    pad = 0.05 * max(float(np.ptp(allp[:, 0])), float(np.ptp(allp[:, 1])), 1e-9)
    fr = _Frame((allp[:, 0].min() - pad, allp[:, 0].max() + pad),
                (allp[:, 1].min() - pad, allp[:, 1].max() + pad))
    body = _axes(fr, title, xlabel, ylabel)
    for i, (name, pts) in enumerate(groups.items()):
        c = PALETTE[i % len(PALETTE)]
        for x, y in np.asarray(pts, float)[:max_points]:
            body.append(f'<circle cx="{_f(fr.px(x))}" cy="{_f(fr.py(y))}" r="1.5" fill="{c}" fill-opacity="0.5"/>')
    return _doc(body + _legend(groups))
