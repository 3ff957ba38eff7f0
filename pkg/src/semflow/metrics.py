"""Correspondence quality metrics: keypoint transfer and mask transfer.

Keypoint accuracy upsamples a grid-resolution flow to image size
(bilinear, with displacement rescaling), transfers each source keypoint by
the bilinearly sampled displacement, and counts it correct when the
Euclidean error is at most alpha * max(box height, box width). The
boundary is inclusive: an error exactly at the threshold counts.

Mask transfer warps the target mask by the (image-resolution) flow,
thresholds at 0.5, and reports the fraction of pixels whose labels agree
plus the intersection-over-union of the foregrounds.
"""
from __future__ import annotations

import numpy as np

from . import grid

__all__ = ["pck", "mask_transfer_metrics"]


def pck(grid_flow: np.ndarray, source_keypoints: np.ndarray,
        target_keypoints: np.ndarray, box: tuple[float, float],
        alpha: float, image_shape: tuple[int, int]) -> float:
    """Fraction of keypoints transferred within alpha * max(box) pixels.

    Args:
        grid_flow: (gh, gw, 2) source->target flow in grid units.
        source_keypoints / target_keypoints: (n, 2) pixel (x, y) arrays.
        box: (box_height, box_width) of the normalization box in pixels.
        alpha: threshold fraction (0.1 is the usual operating point).
        image_shape: (height, width) of the underlying images.
    """
    src = np.asarray(source_keypoints, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(target_keypoints, dtype=np.float64).reshape(-1, 2)
    if src.shape != tgt.shape or src.shape[0] == 0:
        raise ValueError("need equal, nonzero keypoint counts")
    box_h, box_w = box
    if box_h <= 0 or box_w <= 0:
        raise ValueError("normalization box must have positive extent")
    h, w = image_shape
    flow_px = grid.upsample_flow(grid_flow, h, w)
    d = grid.bilinear_sample(flow_px, src[:, 0], src[:, 1])
    transferred = src + d
    errors = np.linalg.norm(transferred - tgt, axis=1)
    threshold = alpha * max(box_h, box_w)
    return float((errors <= threshold).mean())


def mask_transfer_metrics(flow: np.ndarray, source_mask: np.ndarray,
                          target_mask: np.ndarray) -> tuple[float, float]:
    """(label-agreement rate, foreground IoU) of a flow-warped target mask.

    All three inputs share one resolution; upsample a grid flow first. An
    empty union yields IoU 1.0 when both masks are empty, else 0.0.
    """
    source_mask = np.asarray(source_mask)
    target_mask = np.asarray(target_mask)
    if source_mask.shape != target_mask.shape:
        raise ValueError("mask shapes differ")
    if flow.shape[:2] != source_mask.shape:
        raise ValueError(f"flow {flow.shape[:2]} does not match masks {source_mask.shape}")
    estimate = grid.warp(target_mask.astype(np.float64), flow) >= 0.5
    truth = source_mask > 0.5
    label_accuracy = float((estimate == truth).mean())
    union = int(np.logical_or(estimate, truth).sum())
    if union == 0:
        return label_accuracy, 1.0
    intersection = int(np.logical_and(estimate, truth).sum())
    return label_accuracy, float(intersection / union)
