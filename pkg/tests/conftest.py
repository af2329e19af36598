"""Shared fixtures: small intrinsics, a planar GT scene and graph builders."""

import numpy as np
import pytest

from src.ba.residuals import DepthMap
from src.geometry.camera import Intrinsics, default_intrinsics
from src.graph.keyframe_graph import CovisGraph, Keyframe, build_edges
from src.synth.world import gt_flow, make_scene, render_depth, render_features


@pytest.fixture
def k() -> Intrinsics:
    return default_intrinsics()


@pytest.fixture
def k100() -> Intrinsics:
    """fx = fy = 100, principal point (50, 50)."""
    return Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)


@pytest.fixture
def plane_scene():
    return make_scene("plane", "lateral_arc", num_frames=4, seed=0)


@pytest.fixture
def gt_state(plane_scene):
    """GT poses and depths of the planar scene, keyed by frame id."""
    poses = {f: pose for f, pose in enumerate(plane_scene.poses)}
    depths = {f: render_depth(plane_scene, pose, frame_id=f)[0].values for f, pose in poses.items()}
    return poses, depths


def make_gt_graph(scene, window: int = 2, feature_noise: float = 0.0, poses=None, depths=None) -> CovisGraph:
    """CovisGraph with GT flows on every batch edge; poses/depths default to GT."""
    k = scene.intrinsics
    graph = CovisGraph(k)
    for f, gt_pose in enumerate(scene.poses):
        pose = gt_pose if poses is None else poses[f]
        depth = render_depth(scene, gt_pose, frame_id=f)[0].values if depths is None else depths[f]
        graph.add_keyframe(
            Keyframe(
                frame_id=f,
                timestamp=float(scene.timestamps[f]),
                pose=pose,
                depth=DepthMap(depth, f),
                features=render_features(scene, gt_pose, f, noise=feature_noise).values,
            )
        )
    for i, j in sorted(build_edges(graph, window, "batch")):
        graph.add_edge(gt_flow(scene, scene.poses[i], scene.poses[j], source_id=i, target_id=j).flow)
    return graph


@pytest.fixture
def gt_graph_factory():
    return make_gt_graph


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
