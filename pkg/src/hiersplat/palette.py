"""Fixed 64-color palette for semantic label rendering.

Colors are generated once from golden-ratio hue stepping so label maps are
stable across runs and versions; index 0 (background) is black.
"""

from __future__ import annotations

import numpy as np


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _build() -> np.ndarray:
    colors = [(0.0, 0.0, 0.0)]
    golden = 0.6180339887498949
    h = 0.11
    for i in range(1, 64):
        h = (h + golden) % 1.0
        s = (0.55, 0.75, 0.95)[i % 3]
        v = (0.95, 0.7, 0.85)[i % 3 - 1]
        colors.append(_hsv_to_rgb(h, s, v))
    return np.clip(np.round(np.array(colors) * 255), 0, 255).astype(np.uint8)


PALETTE = _build()


def colorize(indices: np.ndarray) -> np.ndarray:
    """Map integer labels to (H, W, 3) uint8 via the fixed palette."""
    return PALETTE[np.asarray(indices, dtype=np.int64) % 64]
