"""Tests for src/synth/world.py"""

import numpy as np
import pytest

from src.geometry.se3 import Pose
from src.synth.world import (
    Plane,
    Sphere,
    SynthScene,
    cast_rays,
    coverage,
    gt_flow,
    gt_point_cloud,
    make_scene,
    make_texture,
    render_depth,
    render_features,
)


def single_surface(k, surface, poses=(Pose.identity(),)) -> SynthScene:
    return SynthScene("custom", (surface,), tuple(poses), 0.1 * np.arange(len(poses)), k)


@pytest.fixture
def texture():
    return make_texture(np.random.default_rng(3))


class TestRendering:
    def test_fronto_parallel_plane_has_constant_depth(self, k, texture):
        scene = single_surface(k, Plane(point=[0.0, 0.0, 4.0], normal=[0.0, 0.0, -1.0], texture=texture))
        depth, valid = render_depth(scene, Pose.identity())
        assert valid.all()
        np.testing.assert_allclose(depth.values, 4.0, rtol=1e-12)

    def test_sphere_center_depth(self, k, texture):
        scene = single_surface(k, Sphere(center=[0.0, 0.0, 8.0], radius=1.0, texture=texture))
        hits = cast_rays(scene, Pose.identity(), uv=np.array([[k.cx, k.cy]]))
        assert hits.valid[0]
        assert hits.depth[0] == pytest.approx(7.0, rel=1e-12)

    def test_miss_is_filled_with_farthest_depth(self, k, texture):
        scene = single_surface(k, Sphere(center=[0.0, 0.0, 8.0], radius=1.0, texture=texture))
        depth, valid = render_depth(scene, Pose.identity())
        assert not valid.all()
        assert np.all(depth.values[~valid] == depth.values[valid].max())

    def test_points_lie_on_the_surface(self, plane_scene):
        plane = plane_scene.surfaces[0]
        hits = cast_rays(plane_scene, plane_scene.poses[1])
        np.testing.assert_allclose((hits.points - plane.point) @ plane.normal, 0.0, atol=1e-9)

    def test_features_are_deterministic(self, plane_scene):
        a = render_features(plane_scene, plane_scene.poses[0], 0, noise=0.02)
        b = render_features(plane_scene, plane_scene.poses[0], 0, noise=0.02)
        np.testing.assert_array_equal(a.values, b.values)
        c = render_features(plane_scene, plane_scene.poses[0], 1, noise=0.02)
        assert not np.array_equal(a.values, c.values)

    def test_textureless_rect_is_zero(self, plane_scene):
        features = render_features(plane_scene, plane_scene.poses[0], 0)
        assert features.textureless.any()
        assert not features.textureless.all()
        np.testing.assert_array_equal(features.values[features.textureless], 0.0)

    def test_texture_fades_into_the_flat_rect(self):
        tex = make_texture(np.random.default_rng(0), flat_rect=(0.0, 0.0, 1.0, 1.0))
        st = np.array([[0.5, 0.5], [1.0, 0.5], [1.125, 0.5], [1.25, 0.5], [2.0, 0.5]])
        np.testing.assert_allclose(tex.amplitude(st), [0.0, 0.0, 0.5, 1.0, 1.0], atol=1e-12)
        steps = np.linspace(0.9, 1.5, 601)
        ramp = tex.amplitude(np.stack([steps, np.full_like(steps, 0.5)], axis=-1))
        assert np.all(np.diff(ramp) >= 0.0)
        assert np.max(np.diff(ramp)) < 0.01

    def test_scene_without_textureless_region(self):
        scene = make_scene("plane", "lateral_arc", num_frames=2, textureless=False)
        assert all(s.texture.flat_rect is None for s in scene.surfaces)
        assert not render_features(scene, scene.poses[0], 0).textureless.any()

    def test_height_field_renders(self):
        scene = make_scene("height_field", "forward_corridor", num_frames=3)
        depth, valid = render_depth(scene, scene.poses[-1])
        assert valid.all()
        assert np.all((depth.values > 3.0) & (depth.values < 6.0))


class TestGroundTruthFlow:
    def test_identical_poses_give_zero_flow(self, plane_scene):
        pose = plane_scene.poses[1]
        gt = gt_flow(plane_scene, pose, pose)
        np.testing.assert_allclose(gt.flow.flow, 0.0, atol=1e-9)
        assert gt.visible.all()

    def test_lateral_translation(self, k, texture):
        d, t = 4.0, 0.2
        scene = single_surface(k, Plane(point=[0.0, 0.0, d], normal=[0.0, 0.0, -1.0], texture=texture))
        gt = gt_flow(scene, Pose.identity(), Pose(np.eye(3), [-t, 0.0, 0.0]))
        np.testing.assert_allclose(gt.flow.flow[gt.valid][:, 0], -k.fx * t / d, atol=1e-9)
        np.testing.assert_allclose(gt.flow.flow[gt.valid][:, 1], 0.0, atol=1e-9)
        # pixels that leave the frame on the left are invalid
        assert not gt.valid[:, 0].any()
        assert gt.valid[:, -1].all()

    def test_confidence_marks_visible_pixels(self, plane_scene):
        gt = gt_flow(plane_scene, plane_scene.poses[0], plane_scene.poses[1])
        np.testing.assert_array_equal(gt.flow.confidence, gt.visible.astype(float))

    def test_occlusion_matches_brute_force(self):
        scene = make_scene("plane_sphere", "lateral_arc", num_frames=6)
        pose_i, pose_j = scene.poses[0], scene.poses[3]
        gt = gt_flow(scene, pose_i, pose_j)
        hits = cast_rays(scene, pose_i)

        points = hits.points[gt.valid]
        origin = np.broadcast_to(pose_j.center(), points.shape)
        along = points - origin
        first = np.min([surface.intersect(origin, along) for surface in scene.surfaces], axis=0)
        brute = first < 1.0 - 1e-6
        # grazing rays hit the occluder within a hair of the point itself
        decided = (first < 1.0 - 1e-4) | (first > 1.0 - 1e-8)

        assert brute.any()
        agree = gt.occluded[gt.valid][decided] == brute[decided]
        assert agree.mean() >= 0.995
        assert decided.mean() >= 0.95


class TestPresets:
    def test_unknown_scene_preset(self):
        with pytest.raises(KeyError):
            make_scene("no_such_scene")

    def test_unknown_trajectory_preset(self):
        with pytest.raises(KeyError):
            make_scene("plane", "no_such_trajectory")

    def test_timestamps(self):
        scene = make_scene("plane", num_frames=5, frame_interval=0.5)
        np.testing.assert_allclose(scene.timestamps, [0.0, 0.5, 1.0, 1.5, 2.0])
        assert scene.num_frames == 5

    def test_plane_fills_every_frame(self, plane_scene):
        np.testing.assert_allclose(coverage(plane_scene), 1.0)

    def test_point_cloud(self, plane_scene, k):
        assert gt_point_cloud(plane_scene).shape == (4 * k.width * k.height, 3)
        assert gt_point_cloud(plane_scene, stride=2).shape == (4 * (k.width // 2) * (k.height // 2), 3)

    def test_same_seed_same_texture(self):
        a = make_scene("plane_sphere", seed=4)
        b = make_scene("plane_sphere", seed=4)
        np.testing.assert_array_equal(a.surfaces[0].texture.phases, b.surfaces[0].texture.phases)
