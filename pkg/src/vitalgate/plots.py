"""Self-contained SVG output (ROC overlays, saliency heatmaps).

Each figure embeds its plotted numbers in a ``<metadata>`` CSV block so the
file doubles as a data artifact.
"""

from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _header(w: int, h: int) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" '
        'font-family="sans-serif" font-size="12">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
    ]


def roc_svg(curves: Mapping[str, tuple[Sequence[float], Sequence[float], float]], title: str) -> str:
    """``curves`` maps label -> (fpr, tpr, auc)."""
    size, pad = 320, 50
    W = H = size + 2 * pad
    out = _header(W, H)
    out.append(f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>')
    x0, y0 = pad, pad + size
    out.append(f'<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{pad + size}" y2="{pad}" stroke="#999" stroke-dasharray="4 4"/>')
    for k in range(6):
        v = k / 5
        out.append(f'<text x="{x0 + v * size:.1f}" y="{y0 + 16}" text-anchor="middle">{v:.1f}</text>')
        out.append(f'<text x="{x0 - 6}" y="{y0 - v * size + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    out.append(f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">False positive rate</text>')
    out.append(f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">True positive rate</text>')
    meta = ["label,fpr,tpr"]
    for i, (label, (fpr, tpr, auc)) in enumerate(curves.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{x0 + f * size:.2f},{y0 - t * size:.2f}" for f, t in zip(fpr, tpr))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = pad + size - 20 - 18 * i
        out.append(f'<line x1="{pad + size - 150}" y1="{ly}" x2="{pad + size - 125}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{pad + size - 120}" y="{ly + 4}">{escape(label)} (AUC {auc:.3f})</text>')
        meta += [f"{label},{f!r},{t!r}" for f, t in zip(fpr, tpr)]
    out.append("<metadata>" + escape("\n".join(meta)) + "</metadata>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap_svg(values: np.ndarray, row_labels: Sequence[str], title: str, cell_w: float | None = None) -> str:
    values = np.asarray(values, dtype=np.float64)
    n_rows, n_cols = values.shape
    cw = cell_w or max(1.0, min(12.0, 800.0 / max(n_cols, 1)))
    ch = 18
    left, top = 110, 40
    W = int(left + cw * n_cols + 20)
    H = int(top + ch * n_rows + 40)
    out = _header(W, H)
    out.append(f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    vmax = float(np.max(np.abs(values))) or 1.0
    for i in range(n_rows):
        out.append(f'<text x="{left - 6}" y="{top + ch * i + 13}" text-anchor="end">{escape(str(row_labels[i]))}</text>')
        for j in range(n_cols):
            a = abs(values[i, j]) / vmax
            if a == 0:
                continue
            out.append(f'<rect x="{left + cw * j:.2f}" y="{top + ch * i}" width="{cw:.2f}" height="{ch}" '
                       f'fill="#b2182b" fill-opacity="{a:.4f}"/>')
    out.append(f'<rect x="{left}" y="{top}" width="{cw * n_cols:.2f}" height="{ch * n_rows}" fill="none" stroke="black"/>')
    out.append(f'<text x="{left + cw * n_cols / 2:.1f}" y="{H - 10}" text-anchor="middle">timestep</text>')
    meta = [",".join(["row", *map(str, range(n_cols))])]
    meta += [",".join([str(row_labels[i]), *(repr(float(v)) for v in values[i])]) for i in range(n_rows)]
    out.append("<metadata>" + escape("\n".join(meta)) + "</metadata>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
