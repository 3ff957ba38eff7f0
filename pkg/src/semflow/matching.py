"""Correlation volumes and the hard / soft / kernel-soft argmax operators.

A correlation tensor scores every pairing of source and target locations
with the dot product of their (L2-normalized) feature vectors, giving a
4-D array indexed (p_y, p_x, q_y, q_x). Each source location's 2-D slice
is L2-normalized, optionally gated by a Gaussian kernel centered on its
discrete argmax, and pushed through a temperature softmax; the expected
target coordinate under that distribution minus the source coordinate is
the flow. No gradient flows through the kernel-center selection: the
kernel enters the backward pass as a constant.

All operations accept plain ndarrays or tape Variables and return the
matching kind.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Variable, lift, value_of

__all__ = [
    "MatchParams",
    "normalize_features", "correlate", "fuse_correlations", "fused_correlation",
    "normalize_correlation_slices", "normalize_correlation_slice",
    "hard_argmax", "gaussian_kernel", "argmax_kernels", "match_distribution",
    "kernel_soft_argmax", "soft_argmax", "hard_flow",
]

DEFAULT_EPSILON = 1e-8


@dataclass(frozen=True)
class MatchParams:
    """Kernel soft argmax settings: softmax temperature, kernel width, norm guard."""

    beta: float = 50.0
    sigma: float = 5.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.beta <= 0 or self.sigma <= 0 or self.epsilon <= 0:
            raise ValueError("beta, sigma, and epsilon must all be positive")


def _maybe_value(out, *inputs):
    if any(isinstance(v, Variable) for v in inputs):
        return out
    return out.value


def _guarded_norm(squared: Variable, epsilon: float) -> Variable:
    # sqrt(max(s, eps^2)) == max(sqrt(s), eps), without the sqrt-at-zero kink
    return tape.sqrt(tape.maximum(squared, epsilon * epsilon))


def normalize_features(grid, epsilon: float = DEFAULT_EPSILON):
    """Divide each location's channel vector by max(its L2 norm, epsilon)."""
    g = lift(grid)
    squared = tape.summation(tape.square(g), axis=-1, keepdims=True)
    out = tape.div(g, _guarded_norm(squared, epsilon))
    return _maybe_value(out, grid)


def correlate(source, target):
    """All-pairs dot products: out[p_y, p_x, q_y, q_x] = <f_s(p), f_t(q)>."""
    s, t = lift(source), lift(target)
    if s.ndim != 3 or t.ndim != 3:
        raise ValueError("correlate expects (h, w, d) feature grids")
    if s.shape[2] != t.shape[2]:
        raise ValueError(f"feature depth mismatch: {s.shape[2]} vs {t.shape[2]}")
    hs, ws, d = s.shape
    ht, wt, _ = t.shape
    flat = tape.matmul(tape.reshape(s, (hs * ws, d)),
                       tape.transpose(tape.reshape(t, (ht * wt, d)), (1, 0)))
    out = tape.reshape(flat, (hs, ws, ht, wt))
    return _maybe_value(out, source, target)


def fuse_correlations(a, b):
    """Combine two same-shape correlation tensors by elementwise product."""
    av, bv = lift(a), lift(b)
    if av.shape != bv.shape:
        raise ValueError(f"correlation shapes differ: {av.shape} vs {bv.shape}")
    return _maybe_value(tape.mul(av, bv), a, b)


def fused_correlation(source_levels, target_levels, epsilon: float = DEFAULT_EPSILON):
    """Normalize each level's features, correlate, and fuse across levels.

    Levels must share spatial sizes (upsample coarser grids first). With a
    single level (or one bare grid) this is plain normalized correlation.
    """
    if not isinstance(source_levels, (list, tuple)):
        source_levels = [source_levels]
    if not isinstance(target_levels, (list, tuple)):
        target_levels = [target_levels]
    source_levels = list(source_levels)
    target_levels = list(target_levels)
    if len(source_levels) != len(target_levels) or not source_levels:
        raise ValueError("source and target must provide the same nonzero level count")
    fused = None
    for fs, ft in zip(source_levels, target_levels):
        c = correlate(normalize_features(lift(fs), epsilon),
                      normalize_features(lift(ft), epsilon))
        fused = c if fused is None else fuse_correlations(fused, c)
    if any(isinstance(level, Variable) for level in (*source_levels, *target_levels)):
        return fused
    return fused.value


def normalize_correlation_slices(c, epsilon: float = DEFAULT_EPSILON):
    """L2-normalize every source location's 2-D target-score slice."""
    cv = lift(c)
    squared = tape.summation(tape.square(cv), axis=(-2, -1), keepdims=True)
    out = tape.div(cv, _guarded_norm(squared, epsilon))
    return _maybe_value(out, c)


def normalize_correlation_slice(c, x: int, y: int, epsilon: float = DEFAULT_EPSILON):
    """Normalized slice for one integer source location (x, y)."""
    cv = lift(c)
    if cv.ndim != 4:
        raise ValueError("expected a 4-D correlation tensor")
    hs, ws = cv.shape[:2]
    if not (isinstance(x, (int, np.integer)) and isinstance(y, (int, np.integer))):
        raise ValueError("source location must be integer")
    if not (0 <= x < ws and 0 <= y < hs):
        raise ValueError(f"source location ({x}, {y}) outside {ws}x{hs} grid")
    out = normalize_correlation_slices(cv[int(y), int(x)], epsilon)
    return _maybe_value(out, c)


def hard_argmax(score_map) -> tuple[int, int]:
    """(x, y) of the maximum entry; ties resolve to smallest y, then x."""
    values = value_of(score_map)
    if values.ndim != 2 or values.size == 0:
        raise ValueError("hard_argmax expects a non-empty 2-D map")
    flat = int(np.argmax(values))  # first occurrence in row-major order
    y, x = divmod(flat, values.shape[1])
    return x, y


def gaussian_kernel(center: tuple[float, float], height: int, width: int,
                    sigma: float) -> np.ndarray:
    """Unnormalized Gaussian bump k(q) = exp(-|q - center|^2 / (2 sigma^2))."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    cx, cy = center
    qy, qx = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.exp(-((qx - cx) ** 2 + (qy - cy) ** 2) / (2.0 * sigma * sigma))


def _slice_argmax_coords(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-major first-max (cx, cy) per source location of a 4-D tensor."""
    hs, ws, ht, wt = values.shape
    flat_idx = values.reshape(hs, ws, ht * wt).argmax(axis=2)
    cy, cx = np.divmod(flat_idx, wt)
    return cx, cy


def argmax_kernels(normalized_values: np.ndarray, sigma: float) -> np.ndarray:
    """Per-source-location Gaussian kernels centered on each slice's argmax.

    Operates on raw values (never Variables): kernel centers come from a
    discrete argmax and are excluded from differentiation.
    """
    hs, ws, ht, wt = normalized_values.shape
    cx, cy = _slice_argmax_coords(normalized_values)
    qy, qx = np.mgrid[0:ht, 0:wt].astype(np.float64)
    d2 = ((qx[None, None] - cx[:, :, None, None]) ** 2
          + (qy[None, None] - cy[:, :, None, None]) ** 2)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def match_distribution(normalized_scores, kernel, beta: float):
    """Temperature softmax over kernel-gated scores, per 2-D slice.

    Accepts a single (h_t, w_t) slice or a full 4-D stack; the softmax runs
    over the last two axes with max-subtraction for overflow safety. The
    kernel is a constant with respect to differentiation.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    n = lift(normalized_scores)
    k = value_of(kernel)
    if n.shape != k.shape:
        raise ValueError(f"scores {n.shape} and kernel {k.shape} shapes differ")
    logits = tape.mul(n, beta * k)
    shift = logits.value.max(axis=(-2, -1), keepdims=True)
    e = tape.exp(tape.sub(logits, shift))
    total = tape.summation(e, axis=(-2, -1), keepdims=True)
    out = tape.div(e, total)
    return _maybe_value(out, normalized_scores)


def _expected_flow(distribution: Variable) -> Variable:
    """Flow field whose target position is the distribution's mean coordinate."""
    hs, ws, ht, wt = distribution.shape
    qx = np.arange(wt, dtype=np.float64)[None, None, None, :]
    qy = np.arange(ht, dtype=np.float64)[None, None, :, None]
    phi_x = tape.summation(tape.mul(distribution, qx), axis=(2, 3))
    phi_y = tape.summation(tape.mul(distribution, qy), axis=(2, 3))
    py, px = np.mgrid[0:hs, 0:ws].astype(np.float64)
    return tape.stack([tape.sub(phi_x, px), tape.sub(phi_y, py)], axis=-1)


def kernel_soft_argmax(c, params: MatchParams = MatchParams(), kernels=None):
    """Differentiable matching: kernel-gated softmax expectation per location.

    Returns (flow, distribution). `kernels` overrides the recomputed
    argmax-centered Gaussians, which gradient checks use to hold the kernel
    fixed across perturbed evaluations.
    """
    cv = lift(c)
    if cv.ndim != 4:
        raise ValueError("expected a 4-D correlation tensor")
    n = normalize_correlation_slices(cv, params.epsilon)
    if kernels is None:
        kernels = argmax_kernels(n.value, params.sigma)
    m = match_distribution(n, kernels, params.beta)
    flow = _expected_flow(m)
    if isinstance(c, Variable):
        return flow, m
    return flow.value, m.value


def soft_argmax(c, beta: float = 50.0, epsilon: float = DEFAULT_EPSILON):
    """Plain softmax expectation (no kernel gating): the all-ones-kernel case."""
    cv = lift(c)
    if cv.ndim != 4:
        raise ValueError("expected a 4-D correlation tensor")
    flow, _ = kernel_soft_argmax(
        cv, MatchParams(beta=beta, sigma=1.0, epsilon=epsilon),
        kernels=np.ones(cv.shape),
    )
    return _maybe_value(flow, c)


def hard_flow(c) -> np.ndarray:
    """Discrete-argmax flow; evaluation-only, carries no gradients."""
    values = value_of(c)
    if values.ndim != 4:
        raise ValueError("expected a 4-D correlation tensor")
    hs, ws = values.shape[:2]
    n = normalize_correlation_slices(values)
    cx, cy = _slice_argmax_coords(n)
    py, px = np.mgrid[0:hs, 0:ws].astype(np.float64)
    return np.stack([cx - px, cy - py], axis=-1)
