"""SVG rendering of ground-truth maps and decoded predictions.

Predicted polylines carry one circle per point whose radius is
proportional to that point's scale-vector norm, so localization
confidence is visible at a glance.  Output is a self-contained SVG
string; callers decide where to write it.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .decoder import ElementPrediction
from .scenes import CLASS_NAMES, Scene
from .validation import ContractViolation

CLASS_COLORS = {
    "ped_crossing": "#2266cc",
    "divider": "#ee8822",
    "boundary": "#22aa55",
}
GT_COLOR = "#999999"


def _svg_xy(points: np.ndarray, x_range, y_range, scale: float) -> np.ndarray:
    """Ego (x, y) -> pixel (sx, sy): y runs right, x runs up."""
    pts = np.asarray(points, dtype=np.float64)
    sx = (pts[:, 1] - y_range[0]) * scale
    sy = (x_range[1] - pts[:, 0]) * scale
    return np.column_stack([sx, sy])


def _path(points_px: np.ndarray, color: str, width: float,
          dashed: bool = False) -> str:
    coords = " L ".join(f"{x:.2f},{y:.2f}" for x, y in points_px)
    dash = ' stroke-dasharray="6,5"' if dashed else ""
    return (f'<path d="M {coords}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{dash} stroke-linecap="round"/>')


def render_svg(elements: Sequence[ElementPrediction] = (),
               scene: Optional[Scene] = None,
               x_range: Tuple[float, float] = (-15.0, 15.0),
               y_range: Tuple[float, float] = (-30.0, 30.0),
               scale: float = 10.0,
               score_threshold: float = 0.4,
               sigma_scale: float = 1.0,
               config_hash: Optional[str] = None) -> str:
    """Render predictions (and the scene's ground truth, when given).

    ``scale`` is pixels per meter.  Predictions whose best class score is
    at or below ``score_threshold`` are skipped.  Each drawn point gets a
    circle of radius ``sigma_scale * scale * ||sigma||_2`` pixels.
    """
    if scale <= 0 or sigma_scale < 0:
        raise ContractViolation("scale must be > 0 and sigma_scale >= 0")
    width = (y_range[1] - y_range[0]) * scale
    height = (x_range[1] - x_range[0]) * scale
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.0f} {height:.0f}">',
    ]
    if config_hash is not None:
        parts.append(f"<!-- config_hash: {config_hash} -->")
    parts.append(f'<rect width="{width:.0f}" height="{height:.0f}" '
                 'fill="#ffffff"/>')

    if scene is not None:
        parts.append('<g opacity="0.9">')
        for element in scene.elements:
            px = _svg_xy(element.line.points, x_range, y_range, scale)
            parts.append(_path(px, GT_COLOR, 1.5, dashed=True))
        parts.append("</g>")

    for e in elements:
        class_id = int(np.argmax(e.scores))
        score = float(e.scores[class_id])
        if score <= score_threshold:
            continue
        color = CLASS_COLORS[CLASS_NAMES[class_id]]
        px = _svg_xy(e.points, x_range, y_range, scale)
        parts.append(f'<g opacity="{0.35 + 0.6 * score:.2f}">')
        parts.append(_path(px, color, 2.0))
        for (sx, sy), sigma in zip(px, e.sigmas):
            r = sigma_scale * scale * float(np.linalg.norm(sigma))
            parts.append(f'<circle cx="{sx:.2f}" cy="{sy:.2f}" r="{r:.2f}" '
                         f'fill="{color}" fill-opacity="0.18" '
                         f'stroke="{color}" stroke-width="0.6"/>')
        parts.append("</g>")

    parts.append("</svg>")
    return "\n".join(parts)
