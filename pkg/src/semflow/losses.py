"""Mask-supervised training losses, differentiable through the flow fields.

Three terms, each summed over both matching directions i in {source, target}:

* mask consistency: mean squared error between each image's mask and the
  other image's mask warped by the corresponding flow, normalized by the
  total cell count of the mask.
* flow consistency: squared magnitude of F_i + warp(F_other; F_i) on
  foreground cells, normalized by the foreground count. Forward and
  backward flows of a perfect matching are opposite, so the sum vanishes.
* smoothness: L1 norm of forward-difference flow derivatives on foreground
  cells, normalized by the foreground count.

The weighted combination runs both matching directions through the kernel
soft argmax. The foreground-normalized terms contribute zero (with a
recorded warning) when a mask has no foreground at all.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffops, tape
from .matching import MatchParams, fused_correlation, kernel_soft_argmax
from .tape import Variable, lift, value_of

__all__ = [
    "LossWeights", "LossReport",
    "mask_consistency", "flow_consistency", "smoothness",
    "combine_terms", "total_loss", "total_loss_graph",
]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the mask, flow-cycle, and smoothness terms."""

    lambda_mask: float = 3.0
    lambda_flow: float = 16.0
    lambda_smooth: float = 0.5

    def __post_init__(self):
        values = (self.lambda_mask, self.lambda_flow, self.lambda_smooth)
        if not all(np.isfinite(v) and v >= 0 for v in values):
            raise ValueError("loss weights must be finite and nonnegative")


@dataclass
class LossReport:
    """Evaluated loss terms, their weighted total, and foreground counts."""

    mask: float
    flow: float
    smooth: float
    total: float
    nf_source: int
    nf_target: int
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mask": self.mask, "flow": self.flow, "smooth": self.smooth,
            "total": self.total, "nf_source": self.nf_source,
            "nf_target": self.nf_target, "warnings": list(self.warnings),
        }


def _maybe_value(out, *inputs):
    if any(isinstance(v, Variable) for v in inputs):
        return out
    return out.value


def _check_sizes(*fields):
    sizes = {value_of(f).shape[:2] for f in fields}
    if len(sizes) > 1:
        raise ValueError(f"mismatched field sizes: {sorted(sizes)}")


def _foreground_count(mask) -> int:
    return int((value_of(mask) > 0.5).sum())


def mask_consistency(mask_source, mask_target, flow_source, flow_target):
    """Both-ways warped-mask reconstruction error, averaged over all cells."""
    _check_sizes(mask_source, mask_target, flow_source, flow_target)
    h, w = value_of(mask_source).shape[:2]
    cells = float(h * w)
    est_source = diffops.warp(lift(mask_target), lift(flow_source))
    est_target = diffops.warp(lift(mask_source), lift(flow_target))
    term_s = tape.div(tape.summation(tape.square(tape.sub(lift(mask_source), est_source))), cells)
    term_t = tape.div(tape.summation(tape.square(tape.sub(lift(mask_target), est_target))), cells)
    out = tape.add(term_s, term_t)
    return _maybe_value(out, mask_source, mask_target, flow_source, flow_target)


def _flow_consistency_term(flow_a, flow_b, mask_a, warnings: list[str], name: str):
    nf = _foreground_count(mask_a)
    if nf == 0:
        warnings.append(f"{name} mask has no foreground; flow term dropped")
        return Variable(0.0)
    aligned = diffops.warp(flow_b, flow_a)
    residual = tape.mul(tape.add(flow_a, aligned), value_of(mask_a)[:, :, None])
    return tape.div(tape.summation(tape.square(residual)), float(nf))


def flow_consistency(flow_source, flow_target, mask_source, mask_target,
                     warnings: list[str] | None = None):
    """Forward/backward cycle error on foreground cells, both directions."""
    _check_sizes(flow_source, flow_target, mask_source, mask_target)
    if warnings is None:
        warnings = []
    fs, ft = lift(flow_source), lift(flow_target)
    out = tape.add(
        _flow_consistency_term(fs, ft, mask_source, warnings, "source"),
        _flow_consistency_term(ft, fs, mask_target, warnings, "target"),
    )
    return _maybe_value(out, flow_source, flow_target)


def _forward_differences(flow: Variable):
    ddx = tape.pad_zeros(tape.sub(flow[:, 1:, :], flow[:, :-1, :]), ((0, 0), (0, 1), (0, 0)))
    ddy = tape.pad_zeros(tape.sub(flow[1:, :, :], flow[:-1, :, :]), ((0, 1), (0, 0), (0, 0)))
    return ddx, ddy


def _smoothness_term(flow, mask, warnings: list[str], name: str):
    nf = _foreground_count(mask)
    if nf == 0:
        warnings.append(f"{name} mask has no foreground; smoothness term dropped")
        return Variable(0.0)
    ddx, ddy = _forward_differences(flow)
    gated = value_of(mask)[:, :, None]
    l1 = tape.add(
        tape.summation(tape.absolute(tape.mul(ddx, gated))),
        tape.summation(tape.absolute(tape.mul(ddy, gated))),
    )
    return tape.div(l1, float(nf))


def smoothness(flow_source, flow_target, mask_source, mask_target,
               warnings: list[str] | None = None):
    """L1 penalty on first-order flow differences inside the foreground."""
    _check_sizes(flow_source, flow_target, mask_source, mask_target)
    if warnings is None:
        warnings = []
    out = tape.add(
        _smoothness_term(lift(flow_source), mask_source, warnings, "source"),
        _smoothness_term(lift(flow_target), mask_target, warnings, "target"),
    )
    return _maybe_value(out, flow_source, flow_target)


def combine_terms(weights: LossWeights, mask_term, flow_term, smooth_term):
    """Weighted sum of the three loss terms."""
    out = tape.add(
        tape.add(tape.mul(weights.lambda_mask, lift(mask_term)),
                 tape.mul(weights.lambda_flow, lift(flow_term))),
        tape.mul(weights.lambda_smooth, lift(smooth_term)),
    )
    return _maybe_value(out, mask_term, flow_term, smooth_term)


def _as_level_list(features):
    if isinstance(features, (list, tuple)):
        return list(features)
    return [features]


def total_loss_graph(source_features, target_features, mask_source, mask_target,
                     params: MatchParams = MatchParams(),
                     weights: LossWeights = LossWeights()):
    """Run matching in both directions and evaluate the full weighted loss.

    Features may be a single (h, w, d) grid per image or a list of grids
    (one per level, equal spatial sizes); level correlations are fused by
    elementwise multiplication. Returns (total Variable, LossReport).
    """
    src_levels = [lift(f) for f in _as_level_list(source_features)]
    tgt_levels = [lift(f) for f in _as_level_list(target_features)]
    fused = fused_correlation(src_levels, tgt_levels, params.epsilon)
    reverse = tape.transpose(fused, (2, 3, 0, 1))

    flow_s, _ = kernel_soft_argmax(fused, params)
    flow_t, _ = kernel_soft_argmax(reverse, params)

    warnings: list[str] = []
    mask_term = mask_consistency(mask_source, mask_target, flow_s, flow_t)
    flow_term = flow_consistency(flow_s, flow_t, mask_source, mask_target, warnings)
    smooth_term = smoothness(flow_s, flow_t, mask_source, mask_target, warnings)
    total = combine_terms(weights, mask_term, flow_term, smooth_term)

    report = LossReport(
        mask=float(value_of(mask_term)), flow=float(value_of(flow_term)),
        smooth=float(value_of(smooth_term)), total=float(value_of(total)),
        nf_source=_foreground_count(mask_source),
        nf_target=_foreground_count(mask_target),
        warnings=warnings,
    )
    return total, report


def total_loss(source_features, target_features, mask_source, mask_target,
               params: MatchParams = MatchParams(),
               weights: LossWeights = LossWeights()) -> LossReport:
    """Evaluate the weighted training loss for one image pair."""
    _, report = total_loss_graph(source_features, target_features,
                                 mask_source, mask_target, params, weights)
    return report
