"""Static SVG charts: a node scatter colored by cluster and grouped metric bars."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#c0392b", "#f1c40f", "#2c7fb8", "#7f8c8d", "#27ae60", "#8e44ad")
UNSET_COLOR = "#bdc3c7"


def _doc(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">')
    return "\n".join(['<?xml version="1.0" encoding="UTF-8"?>', head,
                      f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def cluster_scatter(coords, labels, title: str, names: dict[int, str], cell: float = 36.0) -> str:
    """Nodes at their coordinates; ``labels`` index into ``names`` (0 draws as unassigned)."""
    xy = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    lo = xy.min(axis=0)
    span = np.maximum(xy.max(axis=0) - lo, 1.0)
    margin, legend_w = 40, 170
    w = int(margin * 2 + span[0] * cell + legend_w)
    h = int(margin * 2 + span[1] * cell + 20)
    body = [f'<text x="{margin}" y="22" font-size="14">{escape(title)}</text>']
    for (x, y), k in zip(xy, labels):
        px = margin + (x - lo[0]) * cell
        py = margin + 10 + (span[1] - (y - lo[1])) * cell  # y grows upward on the map
        color = UNSET_COLOR if int(k) == 0 else PALETTE[(int(k) - 1) % len(PALETTE)]
        body.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="{cell * 0.32:.1f}" fill="{color}" stroke="#333" stroke-width="0.5"/>')
    lx = w - legend_w + 10
    for i, (k, name) in enumerate(sorted(names.items())):
        color = UNSET_COLOR if k == 0 else PALETTE[(k - 1) % len(PALETTE)]
        y = margin + 20 * i
        body.append(f'<rect x="{lx}" y="{y}" width="12" height="12" fill="{color}"/>')
        body.append(f'<text x="{lx + 18}" y="{y + 11}">{escape(name)}</text>')
    return _doc(w, h, body)


def grouped_bars(groups: list[str], series: list[str], values, errors=None, title: str = "",
                 y_max: float = 1.0) -> str:
    """One cluster of bars per group, one bar per series; optional symmetric error whiskers."""
    vals = np.asarray(values, dtype=np.float64)
    errs = None if errors is None else np.asarray(errors, dtype=np.float64)
    plot_h, bar_w, gap = 260, 22, 26
    margin_l, margin_t = 50, 40
    group_w = bar_w * len(series) + gap
    w = margin_l + group_w * len(groups) + 40
    h = margin_t + plot_h + 90
    base = margin_t + plot_h
    body = [f'<text x="{margin_l}" y="22" font-size="14">{escape(title)}</text>',
            f'<line x1="{margin_l}" y1="{base}" x2="{w - 20}" y2="{base}" stroke="#333"/>',
            f'<line x1="{margin_l}" y1="{margin_t}" x2="{margin_l}" y2="{base}" stroke="#333"/>']
    for t in np.linspace(0.0, y_max, 5):
        y = base - plot_h * t / y_max
        body.append(f'<text x="{margin_l - 6}" y="{y + 4:.1f}" text-anchor="end">{t:.2f}</text>')
    for gi, group in enumerate(groups):
        x0 = margin_l + gap / 2 + gi * group_w
        for si in range(len(series)):
            v = vals[gi, si]
            if not np.isfinite(v):
                continue
            bh = plot_h * min(max(v, 0.0), y_max) / y_max
            x = x0 + si * bar_w
            body.append(f'<rect x="{x:.1f}" y="{base - bh:.1f}" width="{bar_w - 2}" height="{bh:.1f}" '
                        f'fill="{PALETTE[si % len(PALETTE)]}"/>')
            if errs is not None and np.isfinite(errs[gi, si]):
                top = base - plot_h * min(v + errs[gi, si], y_max) / y_max
                bot = base - plot_h * max(v - errs[gi, si], 0.0) / y_max
                cx = x + (bar_w - 2) / 2
                body.append(f'<line x1="{cx:.1f}" y1="{top:.1f}" x2="{cx:.1f}" y2="{bot:.1f}" stroke="#222"/>')
        body.append(f'<text x="{x0 + bar_w * len(series) / 2:.1f}" y="{base + 16}" text-anchor="middle">'
                    f'{escape(group)}</text>')
    for si, name in enumerate(series):
        y = base + 36 + 16 * si
        body.append(f'<rect x="{margin_l}" y="{y - 10}" width="10" height="10" fill="{PALETTE[si % len(PALETTE)]}"/>')
        body.append(f'<text x="{margin_l + 16}" y="{y}">{escape(name)}</text>')
    return _doc(w, h, body)
