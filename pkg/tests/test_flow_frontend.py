"""Tests for src/frontend/flow.py"""

import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from src.ba.residuals import FlowField
from src.frontend.flow import (
    CorrelationVolume,
    GeometryPrior,
    PriorNoiseModel,
    correlation_volume,
    geometry_prior_flow,
    predict_confidence,
    refine_flow,
)
from src.geometry.se3 import Pose, relative
from src.synth.world import gt_flow, render_depth, render_features

RADIUS = 3
K = 2 * RADIUS + 1


def window_grid(shape, fn):
    """(H, W, K, K) scores with scores[..., dy, dx] = fn(dx, dy)."""
    dy, dx = np.mgrid[-RADIUS : RADIUS + 1, -RADIUS : RADIUS + 1].astype(float)
    return np.broadcast_to(fn(dx, dy), shape + (K, K)).copy()


def volume(scores) -> CorrelationVolume:
    H, W = scores.shape[:2]
    return CorrelationVolume(scores=scores, radius=RADIUS, targets=np.zeros((H, W, 2)))


def zero_flow(k, i=0, j=1) -> FlowField:
    return FlowField(np.zeros(k.shape + (2,)), 1.0, i, j)


def constant_prior(k, depth=5.0) -> GeometryPrior:
    return GeometryPrior(np.full(k.shape, depth), 0)


@pytest.fixture
def frame_pair(plane_scene):
    """Features, GT flow and a reliable-texture mask for the edge (0, 1)."""
    pose_i, pose_j = plane_scene.poses[0], plane_scene.poses[1]
    feat_i = render_features(plane_scene, pose_i, 0)
    feat_j = render_features(plane_scene, pose_j, 1)
    gt = gt_flow(plane_scene, pose_i, pose_j)
    textured = gt.visible & ~binary_dilation(feat_i.textureless, iterations=RADIUS + 2)
    return feat_i.values, feat_j.values, gt, textured


# ---------------------------------------------------------------------------
# correlation volume
# ---------------------------------------------------------------------------


class TestCorrelationVolume:
    def test_shape_and_targets(self, k, frame_pair):
        f_i, f_j, gt, _ = frame_pair
        corr = correlation_volume(f_i, f_j, gt.flow, RADIUS)
        assert corr.scores.shape == k.shape + (K, K)
        np.testing.assert_allclose(corr.targets, k.pixel_grid() + gt.flow.flow)

    def test_windows_outside_the_image_score_minus_infinity(self, k, frame_pair):
        f_i, f_j, _, _ = frame_pair
        corr = correlation_volume(f_i, f_j, zero_flow(k), RADIUS)
        corner = corr.scores[0, 0]
        assert np.all(np.isneginf(corner[:RADIUS, :]))
        assert np.all(np.isneginf(corner[:, :RADIUS]))
        assert np.all(np.isfinite(corner[RADIUS:, RADIUS:]))

    def test_identical_frames_peak_at_zero_offset(self, k, frame_pair):
        f_i, _, _, _ = frame_pair
        corr = correlation_volume(f_i, f_i, zero_flow(k), RADIUS)
        np.testing.assert_array_equal(corr.scores[..., RADIUS, RADIUS], 0.0)

    def test_ground_truth_flow_peaks_at_center(self, frame_pair):
        f_i, f_j, gt, textured = frame_pair
        corr = correlation_volume(f_i, f_j, gt.flow, RADIUS)
        finite = np.all(np.isfinite(corr.scores), axis=(-2, -1))
        sel = textured & finite
        best = np.argmax(corr.scores[sel].reshape(-1, K * K), axis=-1)
        assert np.mean(best == RADIUS * K + RADIUS) >= 0.9

    def test_shifted_flow_peaks_at_the_shift(self, frame_pair):
        f_i, f_j, gt, textured = frame_pair
        shifted = gt.flow.with_flow(gt.flow.flow - [2.0, 0.0])
        corr = correlation_volume(f_i, f_j, shifted, RADIUS)
        finite = np.all(np.isfinite(corr.scores), axis=(-2, -1))
        sel = textured & finite
        best = np.argmax(corr.scores[sel].reshape(-1, K * K), axis=-1)
        assert np.mean(best == RADIUS * K + RADIUS + 2) >= 0.9

    def test_radius_must_be_positive(self, k, frame_pair):
        f_i, f_j, _, _ = frame_pair
        with pytest.raises(ValueError):
            correlation_volume(f_i, f_j, zero_flow(k), 0)


# ---------------------------------------------------------------------------
# refine_flow
# ---------------------------------------------------------------------------


class TestRefineFlow:
    def test_recovers_offset_flow(self, k, frame_pair):
        f_i, f_j, gt, textured = frame_pair
        start = gt.flow.with_flow(gt.flow.flow + [2.0, 1.0])
        corr = correlation_volume(f_i, f_j, start, RADIUS)
        finite = np.all(np.isfinite(corr.scores), axis=(-2, -1))
        refined = refine_flow(corr, np.ones(k.shape, bool), constant_prior(k), Pose.identity(), k, start)
        sel = textured & finite
        error = np.linalg.norm(refined.flow.flow[sel] - gt.flow.flow[sel], axis=-1)
        assert np.mean(error < 0.5) >= 0.85

    def test_uniform_scores_leave_flow_unchanged(self, k):
        refined = refine_flow(
            volume(np.zeros(k.shape + (K, K))), np.ones(k.shape, bool), constant_prior(k), Pose.identity(), k, zero_flow(k)
        )
        np.testing.assert_array_equal(refined.delta, 0.0)

    def test_tie_resolves_toward_current_flow(self, k):
        scores = window_grid(k.shape, lambda dx, dy: np.where((dy == 0) & ((dx == 2) | (dx == -1)), 0.0, -1.0))
        refined = refine_flow(volume(scores), np.ones(k.shape, bool), constant_prior(k), Pose.identity(), k, zero_flow(k))
        np.testing.assert_allclose(refined.delta[..., 0], -1.0)
        np.testing.assert_allclose(refined.delta[..., 1], 0.0)

    def test_subpixel_peak_off_center(self, k):
        scores = window_grid(k.shape, lambda dx, dy: -((dx - 1.3) ** 2 + dy**2))
        refined = refine_flow(volume(scores), np.ones(k.shape, bool), constant_prior(k), Pose.identity(), k, zero_flow(k))
        np.testing.assert_allclose(refined.delta, np.broadcast_to([1.3, 0.0], k.shape + (2,)), atol=1e-12)

    def test_center_peak_is_integer_unless_requested(self, k):
        scores = window_grid(k.shape, lambda dx, dy: -((dx - 0.3) ** 2 + (dy + 0.2) ** 2))
        args = (volume(scores), np.ones(k.shape, bool), constant_prior(k), Pose.identity(), k, zero_flow(k))
        np.testing.assert_array_equal(refine_flow(*args).delta, 0.0)
        sub = refine_flow(*args, subpixel_at_center=True)
        np.testing.assert_allclose(sub.delta, np.broadcast_to([0.3, -0.2], k.shape + (2,)), atol=1e-12)

    def test_step_cap(self, k):
        scores = window_grid(k.shape, lambda dx, dy: np.where((dx == 3) & (dy == 3), 0.0, -1.0))
        refined = refine_flow(
            volume(scores), np.ones(k.shape, bool), constant_prior(k), Pose.identity(), k, zero_flow(k), step_cap=1.0
        )
        np.testing.assert_allclose(np.linalg.norm(refined.delta, axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(refined.delta[..., 0], refined.delta[..., 1], atol=1e-12)

    def test_unreliable_pixels_take_the_prior_flow(self, k, rng):
        T_ji = Pose(np.eye(3), [0.3, 0.0, 0.0])
        mask = np.zeros(k.shape, bool)
        results = [
            refine_flow(volume(scores), mask, constant_prior(k, 5.0), T_ji, k, zero_flow(k))
            for scores in (np.zeros(k.shape + (K, K)), rng.normal(size=k.shape + (K, K)))
        ]
        for refined in results:
            np.testing.assert_array_equal(refined.flow.flow, refined.proposal)
            np.testing.assert_allclose(refined.flow.flow[..., 0], k.fx * 0.3 / 5.0, atol=1e-12)
        np.testing.assert_array_equal(results[0].flow.flow, results[1].flow.flow)

    def test_partial_blend(self, k):
        T_ji = Pose(np.eye(3), [0.3, 0.0, 0.0])
        refined = refine_flow(
            volume(np.zeros(k.shape + (K, K))), np.zeros(k.shape, bool), constant_prior(k), T_ji, k, zero_flow(k), blend=0.5
        )
        np.testing.assert_allclose(refined.flow.flow[..., 0], 1.5, atol=1e-12)

    def test_mixed_mask(self, k):
        T_ji = Pose(np.eye(3), [0.3, 0.0, 0.0])
        mask = np.zeros(k.shape, bool)
        mask[:, : k.width // 2] = True
        scores = window_grid(k.shape, lambda dx, dy: np.where((dx == -1) & (dy == 0), 0.0, -1.0))
        refined = refine_flow(volume(scores), mask, constant_prior(k), T_ji, k, zero_flow(k))
        np.testing.assert_allclose(refined.flow.flow[mask][:, 0], -1.0)
        np.testing.assert_allclose(refined.flow.flow[~mask][:, 0], 3.0, atol=1e-12)

    def test_ground_truth_prior_reproduces_ground_truth_flow(self, plane_scene, k):
        pose_i, pose_j = plane_scene.poses[0], plane_scene.poses[2]
        depth = render_depth(plane_scene, pose_i)[0].values
        gt = gt_flow(plane_scene, pose_i, pose_j)
        refined = refine_flow(
            volume(np.zeros(k.shape + (K, K))),
            np.zeros(k.shape, bool),
            GeometryPrior(depth, 0),
            relative(pose_i, pose_j),
            k,
            zero_flow(k),
        )
        np.testing.assert_allclose(refined.flow.flow[gt.valid], gt.flow.flow[gt.valid], atol=1e-6)

    def test_confidence_is_carried_over(self, k):
        flow = FlowField(np.zeros(k.shape + (2,)), 0.25, 0, 1)
        refined = refine_flow(volume(np.zeros(k.shape + (K, K))), np.ones(k.shape, bool), constant_prior(k), Pose.identity(), k, flow)
        np.testing.assert_array_equal(refined.flow.confidence, 0.25)

    def test_off_center_peak_needs_a_clear_gain(self, k):
        scores = window_grid(
            k.shape, lambda dx, dy: np.select([(dx == 1) & (dy == 0), (dx == 0) & (dy == 0)], [0.0, -0.005], -1.0)
        )
        args = (volume(scores), np.ones(k.shape, bool), constant_prior(k), Pose.identity(), k, zero_flow(k))
        np.testing.assert_array_equal(refine_flow(*args, min_gain=0.01).delta, 0.0)
        assert np.all(refine_flow(*args, min_gain=0.001).delta[..., 0] > 0.5)

    def test_poor_match_does_not_move(self, k):
        scores = window_grid(
            k.shape, lambda dx, dy: np.select([(dx == 2) & (dy == 0), (dx == 0) & (dy == 0)], [-0.5, -1.5], -2.0)
        )
        args = (volume(scores), np.ones(k.shape, bool), constant_prior(k), Pose.identity(), k, zero_flow(k))
        np.testing.assert_array_equal(refine_flow(*args, match_tolerance=0.02).delta, 0.0)
        np.testing.assert_allclose(refine_flow(*args).delta[..., 0], 2.0)

    def test_replaced_pixels_follow_the_geometry(self, k):
        T_ji = Pose(np.eye(3), [0.3, 0.0, 0.0])
        centered = volume(window_grid(k.shape, lambda dx, dy: np.where((dx == 0) & (dy == 0), 0.0, -1.0)))
        near = FlowField(np.broadcast_to([2.6, 0.0], k.shape + (2,)).copy(), 1.0, 0, 1)
        reliable = np.ones(k.shape, bool)

        replaced = refine_flow(centered, ~reliable, constant_prior(k), T_ji, k, near)
        assert replaced.tracking.all()

        followed = refine_flow(centered, reliable, constant_prior(k), T_ji, k, near, tracking=replaced.tracking)
        np.testing.assert_allclose(followed.flow.flow[..., 0], 3.0, atol=1e-12)
        assert followed.tracking.all()

        measured = refine_flow(centered, reliable, constant_prior(k), T_ji, k, near)
        np.testing.assert_array_equal(measured.flow.flow, near.flow)
        assert not measured.tracking.any()

    def test_tracking_stops_when_correlation_disagrees(self, k):
        T_ji = Pose(np.eye(3), [0.3, 0.0, 0.0])
        peak_left = volume(window_grid(k.shape, lambda dx, dy: np.where((dx == -2) & (dy == 0), 0.0, -1.0)))
        refined = refine_flow(
            peak_left, np.ones(k.shape, bool), constant_prior(k), T_ji, k, zero_flow(k), tracking=np.ones(k.shape, bool)
        )
        np.testing.assert_allclose(refined.flow.flow[..., 0], -2.0)
        assert not refined.tracking.any()

    def test_invalid_geometry_keeps_the_flow(self, k):
        flip = Pose(np.diag([-1.0, 1.0, -1.0]), np.zeros(3))
        start = FlowField(np.full(k.shape + (2,), 1.5), 1.0, 0, 1)
        refined = refine_flow(volume(np.zeros(k.shape + (K, K))), np.zeros(k.shape, bool), constant_prior(k), flip, k, start)
        np.testing.assert_array_equal(refined.flow.flow, start.flow)
        assert not refined.tracking.any()

    def test_flow_matching_the_geometry_is_held(self, k):
        T_ji = Pose(np.eye(3), [0.3, 0.0, 0.0])
        peak_left = volume(window_grid(k.shape, lambda dx, dy: np.where((dx == -2) & (dy == 0), 0.0, -1.0)))
        on_geometry = FlowField(np.broadcast_to([3.0, 0.0], k.shape + (2,)).copy(), 1.0, 0, 1)
        args = (peak_left, np.ones(k.shape, bool), constant_prior(k), T_ji, k, on_geometry)
        np.testing.assert_allclose(refine_flow(*args, hold_tolerance=1e-3).delta, 0.0, atol=1e-12)
        np.testing.assert_allclose(refine_flow(*args).delta[..., 0], -2.0)


# ---------------------------------------------------------------------------
# confidence and prior
# ---------------------------------------------------------------------------


class TestPredictConfidence:
    def test_flat_window_has_zero_confidence(self, k):
        omega = predict_confidence(volume(np.zeros(k.shape + (K, K))), np.ones(k.shape, bool))
        np.testing.assert_array_equal(omega, 0.0)

    def test_sharp_peak(self, k):
        scores = window_grid(k.shape, lambda dx, dy: np.where((dx == 0) & (dy == 0), 0.0, -1.0))
        omega = predict_confidence(volume(scores), np.ones(k.shape, bool), scale=0.05)
        np.testing.assert_allclose(omega, 1.0 / 1.05)

    def test_sharper_peak_is_more_confident(self, k):
        def peaked(depth):
            return window_grid(k.shape, lambda dx, dy: np.where((dx == 0) & (dy == 0), 0.0, -depth))

        mask = np.ones(k.shape, bool)
        low = predict_confidence(volume(peaked(0.1)), mask)
        high = predict_confidence(volume(peaked(1.0)), mask)
        assert np.all(high > low)

    def test_poor_match_lowers_confidence(self, k):
        def peaked(top):
            return window_grid(k.shape, lambda dx, dy: np.where((dx == 0) & (dy == 0), top, top - 1.0))

        mask = np.ones(k.shape, bool)
        exact = predict_confidence(volume(peaked(0.0)), mask, match_scale=0.02)
        np.testing.assert_allclose(exact, 1.0 / 1.05)
        off = predict_confidence(volume(peaked(-0.02)), mask, match_scale=0.02)
        np.testing.assert_allclose(off, 0.5 / 1.05)

    def test_unreliable_pixels_are_capped(self, k):
        scores = window_grid(k.shape, lambda dx, dy: np.where((dx == 0) & (dy == 0), 0.0, -1.0))
        omega = predict_confidence(volume(scores), np.zeros(k.shape, bool), masked_cap=0.5)
        np.testing.assert_allclose(omega, 0.5)
        omega = predict_confidence(volume(scores), np.zeros(k.shape, bool), masked_cap=0.5, prior_confidence=0.2)
        np.testing.assert_allclose(omega, 0.2)

    def test_range(self, k, rng):
        scores = -np.abs(rng.normal(size=k.shape + (K, K)))
        scores[0, 0, :RADIUS] = -np.inf
        mask = rng.uniform(size=k.shape) > 0.5
        omega = predict_confidence(volume(scores), mask)
        assert np.all((omega >= 0.0) & (omega <= 1.0))


class TestGeometryPrior:
    def test_prior_flow_matches_parallax(self, k):
        T_ji = Pose(np.eye(3), [0.2, 0.0, 0.0])
        flow, valid = geometry_prior_flow(np.full(k.shape, 4.0), T_ji, k, confidence=0.7, source_id=2, target_id=3)
        assert valid.all()
        assert flow.edge == (2, 3)
        np.testing.assert_allclose(flow.flow[..., 0], k.fx * 0.2 / 4.0, atol=1e-12)
        np.testing.assert_allclose(flow.confidence, 0.7)

    def test_cheirality_failures_have_zero_confidence(self, k):
        flip = Pose(np.diag([-1.0, 1.0, -1.0]), np.zeros(3))
        flow, valid = geometry_prior_flow(np.full(k.shape, 4.0), flip, k)
        assert not valid.any()
        np.testing.assert_array_equal(flow.confidence, 0.0)

    def test_rejects_non_positive_depth(self, k):
        with pytest.raises(ValueError):
            GeometryPrior(np.zeros(k.shape), 0)

    @pytest.mark.parametrize("fraction, expected", [(0.0, 1.0), (0.05, 0.5), (0.2, 0.0)])
    def test_noise_model_confidence(self, fraction, expected):
        assert PriorNoiseModel(fraction=fraction).confidence == pytest.approx(expected)
