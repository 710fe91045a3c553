"""Minimal SVG writers: class-map heatmaps, scatter plots, line charts."""
from __future__ import annotations

from html import escape
from pathlib import Path

import numpy as np

PALETTE = ["#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3", "#937860", "#DA8BC3", "#8C8C8C"]
LIGHT = ["#C9D6EA", "#F4D9C6", "#CDE6D3", "#EBC9CA", "#D9D4EA", "#E1D7CD", "#F2D9EC", "#DDDDDD"]


class _Canvas:
    def __init__(self, width=420, height=360, margin=40, title=""):
        self.w, self.h, self.m = width, height, margin
        self.parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
                      f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
                      f'<rect width="{width}" height="{height}" fill="white"/>']
        if title:
            self.text(width / 2, 18, title, anchor="middle", size=13)

    def set_range(self, x0, x1, y0, y1):
        self.x0, self.x1 = x0, x1 if x1 > x0 else x0 + 1
        self.y0, self.y1 = y0, y1 if y1 > y0 else y0 + 1

    def px(self, x):
        return self.m + (np.asarray(x) - self.x0) / (self.x1 - self.x0) * (self.w - 2 * self.m)

    def py(self, y):
        return self.h - self.m - (np.asarray(y) - self.y0) / (self.y1 - self.y0) * (self.h - 2 * self.m)

    def text(self, x, y, s, anchor="start", size=11):
        self.parts.append(f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" font-size="{size}">'
                          f'{escape(str(s))}</text>')

    def axes(self, xlabel="", ylabel=""):
        m, w, h = self.m, self.w, self.h
        self.parts.append(f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" '
                          f'fill="none" stroke="black"/>')
        for v in np.linspace(self.x0, self.x1, 5):
            self.text(self.px(v), h - m + 14, f"{v:.2g}", anchor="middle", size=9)
        for v in np.linspace(self.y0, self.y1, 5):
            self.text(m - 4, self.py(v) + 3, f"{v:.2g}", anchor="end", size=9)
        if xlabel:
            self.text(w / 2, h - 6, xlabel, anchor="middle")
        if ylabel:
            self.parts.append(f'<text x="12" y="{h / 2:.1f}" text-anchor="middle" '
                              f'transform="rotate(-90 12 {h / 2:.1f})">{escape(ylabel)}</text>')

    def save(self, path):
        Path(path).write_text("\n".join(self.parts + ["</svg>"]))
        return path


def boundary_svg(raster, bounds, path, title="", points=None, labels=None):
    """Class map raster (row i = i-th y value, bottom-up) with optional points on top."""
    raster = np.asarray(raster)
    res_y, res_x = raster.shape
    c = _Canvas(title=title)
    x0, x1, y0, y1 = bounds
    c.set_range(x0, x1, y0, y1)
    dx, dy = (x1 - x0) / res_x, (y1 - y0) / res_y
    cw = (c.w - 2 * c.m) / res_x + 0.5
    ch = (c.h - 2 * c.m) / res_y + 0.5
    for i in range(res_y):
        for j in range(res_x):
            color = LIGHT[int(raster[i, j]) % len(LIGHT)]
            c.parts.append(f'<rect x="{c.px(x0 + j * dx):.2f}" y="{c.py(y0 + (i + 1) * dy):.2f}" '
                           f'width="{cw:.2f}" height="{ch:.2f}" fill="{color}"/>')
    if points is not None:
        _dots(c, np.asarray(points), labels)
    c.axes("x1", "x2")
    return c.save(path)


def _dots(c, pts, labels, r=1.8):
    labels = np.zeros(len(pts), int) if labels is None else np.asarray(labels)
    for (x, y), l in zip(pts, labels):
        if c.x0 <= x <= c.x1 and c.y0 <= y <= c.y1:
            c.parts.append(f'<circle cx="{c.px(x):.1f}" cy="{c.py(y):.1f}" r="{r}" '
                           f'fill="{PALETTE[int(l) % len(PALETTE)]}"/>')


def scatter_svg(coords, labels, path, title="", xlabel="PC1", ylabel="PC2"):
    coords = np.asarray(coords, dtype=float)
    c = _Canvas(title=title)
    pad = lambda lo, hi: (lo - 0.05 * (hi - lo + 1e-12), hi + 0.05 * (hi - lo + 1e-12))
    c.set_range(*pad(coords[:, 0].min(), coords[:, 0].max()), *pad(coords[:, 1].min(), coords[:, 1].max()))
    _dots(c, coords, labels, r=2.2)
    c.axes(xlabel, ylabel)
    return c.save(path)


def line_chart_svg(xs, series: dict, path, title="", xlabel="", ylabel="", ylim=(0.0, 1.0)):
    xs = np.asarray(xs, dtype=float)
    c = _Canvas(width=460, title=title)
    c.set_range(xs.min(), xs.max(), *ylim)
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{c.px(x):.1f},{c.py(y):.1f}" for x, y in zip(xs, ys))
        c.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        c.text(c.w - c.m + 2 - 70, c.m + 14 + 14 * k, name)
        c.parts.append(f'<rect x="{c.w - c.m - 84}" y="{c.m + 6 + 14 * k}" width="10" height="8" fill="{color}"/>')
    c.axes(xlabel, ylabel)
    return c.save(path)
