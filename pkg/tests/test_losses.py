import math

import numpy as np
import pytest

from semflow import checks
from semflow.losses import (LossReport, LossWeights, combine_terms, flow_consistency,
                            mask_consistency, smoothness, total_loss, total_loss_graph)
from semflow.matching import MatchParams


def naive_bilinear(field, x, y):
    h, w = field.shape[:2]
    x0, y0 = math.floor(x), math.floor(y)
    tx, ty = x - x0, y - y0
    out = np.zeros(field.shape[2:]) if field.ndim == 3 else 0.0
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        cx, cy = x0 + dx, y0 + dy
        weight = (tx if dx else 1 - tx) * (ty if dy else 1 - ty)
        if 0 <= cx < w and 0 <= cy < h:
            out = out + weight * field[cy, cx]
    return out


def naive_warp(field, flow):
    out = np.zeros_like(field, dtype=np.float64)
    h, w = flow.shape[:2]
    for y in range(h):
        for x in range(w):
            out[y, x] = naive_bilinear(field, x + flow[y, x, 0], y + flow[y, x, 1])
    return out


def random_fixture(rng, n=6):
    masks = [(rng.random((n, n)) > 0.45).astype(float) for _ in range(2)]
    flows = [rng.uniform(-1.5, 1.5, (n, n, 2)) for _ in range(2)]
    return masks[0], masks[1], flows[0], flows[1]


class TestMaskConsistency:
    def test_equal_masks_zero_flow_is_zero(self):
        mask = np.full((4, 4), 1.0)
        zero = np.zeros((4, 4, 2))
        assert mask_consistency(mask, mask, zero, zero) == 0.0

    def test_maximal_mismatch_is_two(self):
        ones = np.ones((5, 5))
        zeros = np.zeros((5, 5))
        flow = np.zeros((5, 5, 2))
        assert mask_consistency(zeros, ones, flow, flow) == pytest.approx(2.0)

    def test_matches_naive_warp_then_mse(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ms, mt, fs, ft = random_fixture(rng)
            got = mask_consistency(ms, mt, fs, ft)
            est_s = naive_warp(mt, fs)
            est_t = naive_warp(ms, ft)
            want = ((ms - est_s) ** 2).mean() + ((mt - est_t) ** 2).mean()
            assert got == pytest.approx(want, abs=1e-10)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatched"):
            mask_consistency(np.ones((3, 3)), np.ones((4, 4)),
                             np.zeros((3, 3, 2)), np.zeros((3, 3, 2)))


class TestFlowConsistency:
    def test_zero_flows_are_self_consistent(self):
        rng = np.random.default_rng(1)
        ms = (rng.random((5, 5)) > 0.5).astype(float)
        zero = np.zeros((5, 5, 2))
        assert flow_consistency(zero, zero, ms, ms) == 0.0

    def test_opposite_unit_flows_on_interior_safe_masks_is_exactly_zero(self):
        # +1/-1 horizontal shifts: border cells that would sample the zero
        # padding are excluded by the mask choice, so the cycle closes exactly
        h = w = 6
        fs = np.zeros((h, w, 2))
        fs[:, :, 0] = 1.0
        ft = np.zeros((h, w, 2))
        ft[:, :, 0] = -1.0
        ms = np.ones((h, w))
        ms[:, -1] = 0.0
        mt = np.ones((h, w))
        mt[:, 0] = 0.0
        assert flow_consistency(fs, ft, ms, mt) == 0.0

    def test_matches_naive_warp_add_mask_square(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            ms, mt, fs, ft = random_fixture(rng)
            got = flow_consistency(fs, ft, ms, mt)
            want = 0.0
            for flow_a, flow_b, mask in ((fs, ft, ms), (ft, fs, mt)):
                aligned = naive_warp(flow_b, flow_a)
                residual = (flow_a + aligned) * mask[:, :, None]
                want += (residual ** 2).sum() / (mask > 0.5).sum()
            assert got == pytest.approx(want, abs=1e-10)

    def test_empty_foreground_contributes_zero_with_warning(self):
        warnings = []
        value = flow_consistency(np.ones((3, 3, 2)), np.ones((3, 3, 2)),
                                 np.zeros((3, 3)), np.ones((3, 3)), warnings)
        assert np.isfinite(value)
        assert any("no foreground" in w for w in warnings)


class TestSmoothness:
    def test_constant_flow_is_smooth(self):
        flow = np.full((4, 4, 2), 3.2)
        mask = np.ones((4, 4))
        assert smoothness(flow, flow, mask, mask) == 0.0

    def test_linear_ramp_counts_unit_differences(self):
        h = w = 5
        flow = np.zeros((h, w, 2))
        flow[:, :, 0] = np.arange(w)[None, :]  # dx increases by 1 per column
        mask = np.ones((h, w))
        # per direction: h rows x (w-1) interior forward differences, / N_F
        want_one_direction = h * (w - 1) / (h * w)
        got = smoothness(flow, np.zeros((h, w, 2)), mask, mask)
        assert got == pytest.approx(want_one_direction)

    def test_matches_naive_difference_loops(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            ms, mt, fs, ft = random_fixture(rng, n=5)
            got = smoothness(fs, ft, ms, mt)
            want = 0.0
            for flow, mask in ((fs, ms), (ft, mt)):
                acc = 0.0
                for y in range(5):
                    for x in range(5):
                        for c in range(2):
                            gx = flow[y, x + 1, c] - flow[y, x, c] if x + 1 < 5 else 0.0
                            gy = flow[y + 1, x, c] - flow[y, x, c] if y + 1 < 5 else 0.0
                            acc += abs(gx * mask[y, x]) + abs(gy * mask[y, x])
                want += acc / (mask > 0.5).sum()
            assert got == pytest.approx(want, abs=1e-10)

    def test_invariant_to_global_flow_offset(self):
        rng = np.random.default_rng(4)
        ms, mt, fs, ft = random_fixture(rng)
        shifted = fs + np.array([3.7, -1.2])
        assert smoothness(fs, ft, ms, mt) == pytest.approx(
            smoothness(shifted, ft, ms, mt), abs=1e-12)


class TestTotalLoss:
    def test_zero_weights_zero_total(self):
        rng = np.random.default_rng(5)
        fs, ft = rng.standard_normal((4, 4, 6)), rng.standard_normal((4, 4, 6))
        mask = (rng.random((4, 4)) > 0.4).astype(float)
        report = total_loss(fs, ft, mask, mask, weights=LossWeights(0.0, 0.0, 0.0))
        assert report.total == 0.0

    def test_report_recombines_from_individual_terms(self):
        rng = np.random.default_rng(6)
        fs, ft = rng.standard_normal((8, 8, 6)), rng.standard_normal((8, 8, 6))
        ms = (rng.random((8, 8)) > 0.4).astype(float)
        mt = (rng.random((8, 8)) > 0.4).astype(float)
        weights = LossWeights(3.0, 16.0, 0.5)
        report = total_loss(fs, ft, ms, mt, weights=weights)
        want = 3.0 * report.mask + 16.0 * report.flow + 0.5 * report.smooth
        assert report.total == pytest.approx(want, abs=1e-9)

    def test_pair_role_swap_leaves_total_unchanged(self):
        rng = np.random.default_rng(7)
        fs, ft = rng.standard_normal((5, 5, 8)), rng.standard_normal((5, 5, 8))
        ms = (rng.random((5, 5)) > 0.4).astype(float)
        mt = (rng.random((5, 5)) > 0.4).astype(float)
        forward = total_loss(fs, ft, ms, mt)
        swapped = total_loss(ft, fs, mt, ms)
        assert forward.total == pytest.approx(swapped.total, abs=1e-9)

    def test_terms_are_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            fs, ft = rng.standard_normal((4, 4, 6)), rng.standard_normal((4, 4, 6))
            ms = (rng.random((4, 4)) > 0.3).astype(float)
            mt = (rng.random((4, 4)) > 0.3).astype(float)
            report = total_loss(fs, ft, ms, mt)
            assert report.mask >= 0 and report.flow >= 0 and report.smooth >= 0

    def test_multi_level_features_fuse(self):
        rng = np.random.default_rng(9)
        levels_s = [rng.standard_normal((4, 4, 6)) for _ in range(2)]
        levels_t = [rng.standard_normal((4, 4, 6)) for _ in range(2)]
        mask = np.ones((4, 4))
        report = total_loss(levels_s, levels_t, mask, mask)
        assert np.isfinite(report.total)

    def test_gradient_of_total_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        ms = (rng.random((6, 6)) > 0.45).astype(float)
        mt = (rng.random((6, 6)) > 0.45).astype(float)
        point = {"fs": rng.standard_normal((6, 6, 8)),
                 "ft": rng.standard_normal((6, 6, 8))}

        def f(p):
            return total_loss_graph(p["fs"], p["ft"], ms, mt)[0]

        report = checks.grad_check(f, point, step=1e-5, tolerance=1e-4)
        assert report["passed"], report["max_rel_error"]

    def test_report_serializes_with_stable_keys(self):
        report = LossReport(mask=0.1, flow=0.2, smooth=0.3, total=3.5,
                            nf_source=9, nf_target=7, warnings=["w"])
        data = report.to_json()
        assert set(data) == {"mask", "flow", "smooth", "total",
                             "nf_source", "nf_target", "warnings"}


class TestCombineTerms:
    def test_weighted_sum(self):
        weights = LossWeights(2.0, 3.0, 4.0)
        assert combine_terms(weights, 1.0, 10.0, 100.0) == pytest.approx(432.0)

    def test_weights_validate(self):
        with pytest.raises(ValueError, match="nonnegative"):
            LossWeights(-1.0, 0.0, 0.0)
        with pytest.raises(ValueError, match="nonnegative"):
            LossWeights(np.inf, 0.0, 0.0)
