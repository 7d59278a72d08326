"""Static SVG overlay of true vs predicted trajectories (dashed truth, solid prediction)."""

from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"]


def read_predictions(text: str) -> tuple[np.ndarray, list[str], np.ndarray, np.ndarray]:
    """Parse a predictions CSV into (steps, dimension names, truth, prediction)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty predictions file")
    header, body = rows[0], rows[1:]
    if not header or header[0] != "step":
        raise ValueError("predictions CSV must start with a 'step' column")
    true_cols = [h[len("true_"):] for h in header[1:] if h.startswith("true_")]
    pred_cols = [h[len("pred_"):] for h in header[1:] if h.startswith("pred_")]
    if not true_cols or true_cols != pred_cols or len(header) != 1 + 2 * len(true_cols):
        raise ValueError(f"expected columns step, true_*, pred_* with matching names; got {header}")
    if not body:
        raise ValueError("predictions CSV has no rows")
    m = len(true_cols)
    try:
        data = np.array([[float(x) for x in r] for r in body])
    except ValueError as exc:
        raise ValueError(f"non-numeric value in predictions CSV: {exc}") from exc
    if data.shape[1] != 1 + 2 * m:
        raise ValueError("ragged predictions CSV")
    return data[:, 0], true_cols, data[:, 1:1 + m], data[:, 1 + m:]


def write_predictions(steps, names, truth, pred) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [f"true_{n}" for n in names] + [f"pred_{n}" for n in names])
    for i, step in enumerate(steps):
        w.writerow([int(step)] + [repr(float(v)) for v in truth[i]] + [repr(float(v)) for v in pred[i]])
    return buf.getvalue()


def overlay_svg(steps, names, truth, pred, title: str = "", width: int = 640, height: int = 360) -> str:
    """One polyline per dimension per role; truth dashed, prediction solid."""
    pad = 40
    steps = np.asarray(steps, float)
    both = np.concatenate([truth.ravel(), pred.ravel()])
    lo, hi = float(both.min()), float(both.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    x0, x1 = float(steps.min()), float(steps.max())
    if x1 == x0:
        x1 = x0 + 1.0

    def pts(col):
        xs = pad + (steps - x0) / (x1 - x0) * (width - 2 * pad)
        ys = height - pad - (col - lo) / (hi - lo) * (height - 2 * pad)
        return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
        'fill="none" stroke="#999999"/>',
        f'<text x="{pad}" y="{pad - 12}" font-family="sans-serif" font-size="13">{escape(title)}</text>',
        f'<text x="{pad}" y="{height - 12}" font-family="sans-serif" font-size="11">step {x0:g} to {x1:g}; '
        f'range {lo:.3g} to {hi:.3g}</text>',
    ]
    for j, name in enumerate(names):
        color = PALETTE[j % len(PALETTE)]
        out.append(f'<polyline class="truth" data-dim="{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5" stroke-dasharray="6,4" points="{pts(truth[:, j])}"/>')
        out.append(f'<polyline class="prediction" data-dim="{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5" points="{pts(pred[:, j])}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
