"""Flow rendering helpers for the command-line tools.

Flows render with the usual color wheel: hue encodes the displacement
angle, saturation the magnitude relative to the largest displacement (or a
caller-supplied scale). Zero flow therefore comes out white, and a
self-matched image produces a uniform neutral frame.
"""
from __future__ import annotations

import numpy as np

from . import grid

__all__ = ["flow_to_rgb", "warp_preview"]


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    channels = [
        np.choose(i, [v, q, p, p, t, v]),
        np.choose(i, [t, v, v, q, p, p]),
        np.choose(i, [p, p, t, v, v, q]),
    ]
    return np.stack(channels, axis=-1)


def flow_to_rgb(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Angle-hue / magnitude-saturation rendering of a flow field."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (h, w, 2), got {flow.shape}")
    dx, dy = flow[:, :, 0], flow[:, :, 1]
    magnitude = np.hypot(dx, dy)
    if max_magnitude is None:
        max_magnitude = max(float(magnitude.max()), 1e-9)
    hue = (np.arctan2(dy, dx) / (2.0 * np.pi)) % 1.0
    saturation = np.clip(magnitude / max_magnitude, 0.0, 1.0)
    rgb = _hsv_to_rgb(hue, saturation, np.ones_like(hue))
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def warp_preview(target_image: np.ndarray, grid_flow: np.ndarray) -> np.ndarray:
    """Target image pulled back through a grid-resolution flow.

    Upsamples the flow to image resolution (displacements rescaled to
    pixels) and resamples the target; a good flow reconstructs the source.
    """
    target_image = np.asarray(target_image)
    h, w = target_image.shape[:2]
    flow_px = grid.upsample_flow(grid_flow, h, w)
    warped = grid.warp(target_image.astype(np.float64), flow_px)
    return np.clip(np.round(warped), 0, 255).astype(np.uint8)
