"""Grids, masks, flow fields, and plain-numpy resampling primitives.

Conventions used across the package:

* Coordinates are (x, y) with x = column and y = row, zero-based; integer
  coordinates address cell centers and (0, 0) is the top-left cell.
* A feature grid is an (h, w, d) float array, a mask is (h, w) with values
  in [0, 1], and a flow field is (h, w, 2) with channel 0 = dx and
  channel 1 = dy, both in grid units.
* Sampling outside the grid reads zeros (zero padding, not clamping), so a
  location matched into nothing shows up as mass loss in a warped mask.

These are the eager (non-differentiable) implementations; `diffops` holds
the tape-recorded equivalents used inside the training pipeline.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "bilinear_sample", "warp", "upsample_bilinear", "upsample_flow",
    "identity_coords", "downsample_mask", "mask_bbox",
]


def identity_coords(height: int, width: int):
    """Per-cell (x, y) coordinate planes, each of shape (height, width)."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def bilinear_sample(field: np.ndarray, x, y) -> np.ndarray:
    """Sample a field at real-valued (x, y) with zero padding outside.

    `field` is (h, w) or (h, w, c); `x`/`y` may be scalars or arrays of a
    common shape S. Returns shape S (plus the channel axis if present).
    """
    field = np.asarray(field, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("sample coordinates must be finite")
    h, w = field.shape[:2]
    channels = field.ndim == 3

    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    tx = x - x0
    ty = y - y0

    out = 0.0
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        cx = x0 + dx
        cy = y0 + dy
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        weight = (tx if dx else 1.0 - tx) * (ty if dy else 1.0 - ty) * valid
        values = field[np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)]
        if channels:
            weight = weight[..., None]
        out = out + weight * values
    return out


def warp(field: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Resample `field` at p + flow(p) for every cell p."""
    field = np.asarray(field, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (h, w, 2), got {flow.shape}")
    if field.shape[:2] != flow.shape[:2]:
        raise ValueError(f"field {field.shape[:2]} and flow {flow.shape[:2]} sizes differ")
    xs, ys = identity_coords(*flow.shape[:2])
    return bilinear_sample(field, xs + flow[:, :, 0], ys + flow[:, :, 1])


def _resize_coords(new_n: int, old_n: int) -> np.ndarray:
    # align corners: first and last cell centers map onto each other
    if new_n == 1:
        return np.zeros(1)
    return np.arange(new_n) * (old_n - 1) / (new_n - 1)


def upsample_bilinear(field: np.ndarray, new_height: int, new_width: int) -> np.ndarray:
    """Resize by bilinear interpolation with the align-corners convention."""
    field = np.asarray(field, dtype=np.float64)
    if new_height < 1 or new_width < 1:
        raise ValueError("target size must be at least 1x1")
    h, w = field.shape[:2]
    xs = _resize_coords(new_width, w)
    ys = _resize_coords(new_height, h)
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample(field, gx, gy)


def upsample_flow(flow: np.ndarray, new_height: int, new_width: int) -> np.ndarray:
    """Resize a flow field, rescaling displacements into the new grid units.

    dx is multiplied by new_width/width and dy by new_height/height, so a
    displacement keeps pointing at the same physical location after the
    resize.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (h, w, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    out = upsample_bilinear(flow, new_height, new_width)
    return out * np.array([new_width / w, new_height / h])


def downsample_mask(mask: np.ndarray, grid_height: int, grid_width: int) -> np.ndarray:
    """Reduce a full-resolution binary mask to grid resolution.

    Area-averages over integer blocks, then thresholds at 0.5. Requires the
    mask dimensions to be divisible by the grid dimensions.
    """
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    if h % grid_height or w % grid_width:
        raise ValueError(f"mask {mask.shape} not divisible into {grid_height}x{grid_width} cells")
    fh, fw = h // grid_height, w // grid_width
    blocks = mask.reshape(grid_height, fh, grid_width, fw)
    return (blocks.mean(axis=(1, 3)) >= 0.5).astype(np.float64)


def mask_bbox(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight (x, y, width, height) box around a mask's foreground."""
    mask = np.asarray(mask)
    ys, xs = np.nonzero(mask > 0.5)
    if ys.size == 0:
        raise ValueError("mask has no foreground")
    return (float(xs.min()), float(ys.min()),
            float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))
