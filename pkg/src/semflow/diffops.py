"""Differentiable grid operations, composed from tape primitives.

Mirrors the plain-numpy `grid` module but records every step on the tape,
so gradients flow through field values and through sampling coordinates.
Index selection (floor, validity masks, resize weights) is inherently
discrete and enters as constants; the fractional parts stay differentiable,
which reproduces the one-sided analytic derivative of the interpolation
branch in use.
"""
from __future__ import annotations

import numpy as np

from . import tape
from .tape import Variable, lift, value_of

__all__ = ["bilinear_sample", "warp", "upsample_bilinear", "upsample_flow", "conv2d_samepad"]


def bilinear_sample(field, x, y) -> Variable:
    """Zero-padded bilinear sampling of an (h, w[, c]) field at (x, y)."""
    field, x, y = lift(field), lift(x), lift(y)
    if not (np.isfinite(x.value).all() and np.isfinite(y.value).all()):
        raise ValueError("sample coordinates must be finite")
    h, w = field.shape[:2]
    channels = field.ndim == 3

    x0 = np.floor(x.value).astype(np.int64)
    y0 = np.floor(y.value).astype(np.int64)
    tx = tape.sub(x, x0)
    ty = tape.sub(y, y0)

    out = None
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        cx = x0 + dx
        cy = y0 + dy
        valid = ((cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)).astype(np.float64)
        values = tape.gather(field, (np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)))
        wx = tx if dx else tape.sub(1.0, tx)
        wy = ty if dy else tape.sub(1.0, ty)
        weight = tape.mul(tape.mul(wx, wy), valid)
        if channels:
            weight = tape.reshape(weight, weight.shape + (1,))
        term = tape.mul(weight, values)
        out = term if out is None else tape.add(out, term)
    return out


def warp(field, flow) -> Variable:
    """Differentiable resample of `field` at p + flow(p)."""
    field, flow = lift(field), lift(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (h, w, 2), got {flow.shape}")
    if field.shape[:2] != flow.shape[:2]:
        raise ValueError(f"field {field.shape[:2]} and flow {flow.shape[:2]} sizes differ")
    h, w = flow.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    x = tape.add(flow[:, :, 0], xs)
    y = tape.add(flow[:, :, 1], ys)
    return bilinear_sample(field, x, y)


def _resize_coords(new_n: int, old_n: int) -> np.ndarray:
    if new_n == 1:
        return np.zeros(1)
    return np.arange(new_n) * (old_n - 1) / (new_n - 1)


def upsample_bilinear(field, new_height: int, new_width: int) -> Variable:
    """Align-corners bilinear resize; a fixed linear map of the field."""
    field = lift(field)
    if new_height < 1 or new_width < 1:
        raise ValueError("target size must be at least 1x1")
    h, w = field.shape[:2]
    gx, gy = np.meshgrid(_resize_coords(new_width, w), _resize_coords(new_height, h))
    return bilinear_sample(field, gx, gy)


def upsample_flow(flow, new_height: int, new_width: int) -> Variable:
    """Resize a flow and rescale dx, dy into the new grid units."""
    flow = lift(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (h, w, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    out = upsample_bilinear(flow, new_height, new_width)
    return tape.mul(out, np.array([new_width / w, new_height / h]))


def conv2d_samepad(image, kernel, bias=None) -> Variable:
    """Same-size cross-correlation with zero padding.

    image: (h, w, c_in); kernel: (k, k, c_in, c_out), k odd; bias: (c_out,).
    Differentiable in the image, the kernel, and the bias.
    """
    image, kernel = lift(image), lift(kernel)
    if image.ndim != 3 or kernel.ndim != 4:
        raise ValueError("conv2d expects (h, w, c_in) image and (k, k, c_in, c_out) kernel")
    k = kernel.shape[0]
    if kernel.shape[1] != k or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kernel.shape[:2]}")
    c_in = image.shape[2]
    if kernel.shape[2] != c_in:
        raise ValueError(f"kernel expects {kernel.shape[2]} input channels, image has {c_in}")
    h, w = image.shape[:2]
    c_out = kernel.shape[3]
    pad = k // 2

    padded = tape.pad_zeros(image, ((pad, pad), (pad, pad), (0, 0)))
    ys, xs = np.mgrid[0:h, 0:w]
    oy, ox = np.mgrid[0:k, 0:k]
    iy = ys[:, :, None, None] + oy[None, None, :, :]
    ix = xs[:, :, None, None] + ox[None, None, :, :]
    patches = tape.gather(padded, (iy, ix))                      # (h, w, k, k, c_in)
    cols = tape.reshape(patches, (h * w, k * k * c_in))
    weights = tape.reshape(kernel, (k * k * c_in, c_out))
    out = tape.reshape(tape.matmul(cols, weights), (h, w, c_out))
    if bias is not None:
        out = tape.add(out, lift(bias))
    return out
