"""Tests for src/ba/solver.py"""

from dataclasses import replace

import numpy as np
import pytest

from src.ba.residuals import FlowField, evaluate_edge
from src.ba.solver import BAState, LinearSystem, ba_iterate, linearize, retract, schur_solve, total_cost
from src.errors import EmptySystem, MaxDampingExceeded, SingularSystem
from src.geometry.camera import Intrinsics, transform_project
from src.geometry.se3 import Pose, exp, perturb, relative
from src.graph.keyframe_graph import CovisGraph, keyframe_ate
from src.schemas import BAConfig
from src.synth.world import make_scene


def perturbed_state(graph: CovisGraph, rng, angle_deg=1.0, translation_m=0.02, depth_noise=0.03) -> BAState:
    state = graph.state()
    poses = {
        f: p if f == 0 else perturb(p, rng, np.deg2rad(angle_deg), translation_m) for f, p in state.poses.items()
    }
    depths = {f: d * (1.0 + rng.uniform(-depth_noise, depth_noise, size=d.shape)) for f, d in state.depths.items()}
    return BAState(poses, depths)


def dense_step(sys: LinearSystem) -> np.ndarray:
    """Damped KKT solve over [free poses | depths] with the optional scale row."""
    H, g, c = sys.to_dense()
    A = H + sys.damping * np.eye(len(g))
    if c is None:
        return np.linalg.solve(A, -g)
    n = len(g)
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = A
    kkt[:n, n] = c
    kkt[n, :n] = c
    return np.linalg.solve(kkt, np.concatenate([-g, [0.0]]))[:n]


def flatten_step(sys: LinearSystem, delta_pose, delta_depth) -> np.ndarray:
    parts = [delta_pose[f] for f in sys.free_ids]
    parts += [delta_depth[f].ravel() for f in sorted(sys.depth_hessian)]
    return np.concatenate(parts)


def validity(graph, state: BAState, config: BAConfig) -> np.ndarray:
    masks = []
    for edge, flow in graph.flow_edges():
        res = evaluate_edge(
            edge, state.poses, state.depths, flow, graph.intrinsics, tau=config.geometry_tau, z_min=config.z_min
        ).residuals
        masks += [res.valid.ravel(), res.omega_set.ravel()]
    return np.concatenate(masks)


def pose_derivative(graph, state: BAState, config: BAConfig, frame: int, axis: int, eps: float = 1e-6) -> float | None:
    """Central difference of the total cost along one twist axis; None if a pixel changed validity."""
    e = np.zeros(6)
    e[axis] = eps
    plus = BAState({**state.poses, frame: exp(e).compose(state.poses[frame])}, state.depths)
    minus = BAState({**state.poses, frame: exp(-e).compose(state.poses[frame])}, state.depths)
    base = validity(graph, state, config)
    if not (np.array_equal(base, validity(graph, plus, config)) and np.array_equal(base, validity(graph, minus, config))):
        return None
    return (total_cost(graph, plus, config) - total_cost(graph, minus, config)) / (2 * eps)


@pytest.fixture
def plane_graph(plane_scene, gt_graph_factory):
    return gt_graph_factory(plane_scene)


@pytest.fixture
def tiny_graph(gt_graph_factory):
    """3 frames of 4x4 pixels: small enough for a dense oracle."""
    k = Intrinsics(fx=4.0, fy=4.0, cx=1.5, cy=1.5, width=4, height=4)
    scene = make_scene("plane", "lateral_arc", num_frames=3, intrinsics=k, seed=1)
    return gt_graph_factory(scene)


# ---------------------------------------------------------------------------
# linearize
# ---------------------------------------------------------------------------


class TestLinearize:
    def test_gradient_vanishes_at_ground_truth(self, plane_graph):
        sys = linearize(plane_graph, plane_graph.state(), BAConfig())
        assert sys.gradient_norm() < 1e-7
        assert sys.num_residuals > 0

    def test_single_pixel_pose_block(self, plane_scene, gt_graph_factory, rng):
        graph = gt_graph_factory(plane_scene)
        state = perturbed_state(graph, rng)
        k = graph.intrinsics
        y, x = 20, 30
        confidence = np.zeros(k.shape)
        confidence[y, x] = 1.0
        edge = graph.edges[(0, 1)]
        single = CovisGraph(k)
        for f in (0, 1):
            single.add_keyframe(graph.nodes[f])
        single.add_edge(FlowField(edge.flow.flow, confidence, 0, 1))

        config = BAConfig(use_geometry=False, huber_delta=1e6)
        sys = linearize(single, state, config)
        assert sys.num_residuals == 1

        T_ji = relative(state.poses[0], state.poses[1])
        proj = transform_project(np.array([x, y], dtype=float), np.array(state.depths[0][y, x]), T_ji, k)
        J = proj.j_pose
        np.testing.assert_allclose(sys.pose_block(1, 1), J.T @ J, rtol=1e-10, atol=1e-10)
        r = proj.uv - (np.array([x, y]) + edge.flow.flow[y, x])
        np.testing.assert_allclose(sys.pose_grad(1), J.T @ r, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(sys.depth_hessian[0][y, x], proj.j_depth @ proj.j_depth, rtol=1e-10)

    def test_gradient_matches_finite_differences_flow_only(self, plane_graph, rng):
        config = BAConfig(use_geometry=False, huber_delta=1.0)
        state = perturbed_state(plane_graph, rng)
        sys = linearize(plane_graph, state, config)
        checked = 0
        for f in (1, 2):
            for a in range(6):
                numeric = pose_derivative(plane_graph, state, config, f, a)
                if numeric is None:
                    continue
                assert numeric == pytest.approx(sys.pose_grad(f)[a], rel=1e-4, abs=1e-4 * np.abs(sys.pose_grad(f)).max())
                checked += 1
        assert checked >= 10

        h = 1e-5
        for y, x in ((10, 10), (24, 32), (40, 50)):
            plus, minus = state.copy(), state.copy()
            plus.depths[1][y, x] += h
            minus.depths[1][y, x] -= h
            numeric = (total_cost(plane_graph, plus, config) - total_cost(plane_graph, minus, config)) / (2 * h)
            assert numeric == pytest.approx(sys.depth_gradient[1][y, x], rel=1e-3, abs=1e-5)

    def test_pose_gradient_matches_finite_differences_with_geometry(self, plane_scene, gt_graph_factory, rng):
        # with a constant D_j the detached sample is exact
        k = plane_scene.intrinsics
        graph = gt_graph_factory(plane_scene, depths={f: np.full(k.shape, 4.5) for f in range(4)})
        for edge in graph.edges.values():
            edge.flow = edge.flow.with_flow(edge.flow.flow, np.full(k.shape, 0.5))
        config = BAConfig(use_geometry=True, geometry_tau=1e3)
        state = perturbed_state(graph, rng, depth_noise=0.0)
        sys = linearize(graph, state, config)
        checked = 0
        for f in (1, 3):
            for a in range(6):
                numeric = pose_derivative(graph, state, config, f, a)
                if numeric is None:
                    continue
                assert numeric == pytest.approx(sys.pose_grad(f)[a], rel=1e-4, abs=1e-4 * np.abs(sys.pose_grad(f)).max())
                checked += 1
        assert checked >= 10

    def test_no_valid_residual_raises(self, plane_graph):
        state = plane_graph.state()
        config = BAConfig(use_geometry=False)
        silent = CovisGraph(plane_graph.intrinsics)
        for f in (0, 1):
            silent.add_keyframe(plane_graph.nodes[f])
        silent.add_edge(plane_graph.edges[(0, 1)].flow.with_flow(plane_graph.edges[(0, 1)].flow.flow, 0.0))
        with pytest.raises(EmptySystem):
            linearize(silent, state, config)

    def test_scale_anchor_only_with_one_fixed_frame(self, plane_graph):
        state = plane_graph.state()
        assert linearize(plane_graph, state, BAConfig()).scale_anchor == 0
        assert linearize(plane_graph, state, BAConfig(fixed_frame_ids=[0, 1])).scale_anchor is None
        assert linearize(plane_graph, state, BAConfig(fix_scale=False)).scale_anchor is None


# ---------------------------------------------------------------------------
# schur_solve
# ---------------------------------------------------------------------------


class TestSchurSolve:
    @pytest.mark.parametrize("fix_scale", [True, False])
    def test_matches_dense_solve(self, tiny_graph, rng, fix_scale):
        config = BAConfig(fix_scale=fix_scale, damping_init=1e-3)
        state = perturbed_state(tiny_graph, rng, angle_deg=2.0, translation_m=0.05, depth_noise=0.1)
        sys = linearize(tiny_graph, state, config)
        assert (sys.scale_anchor is not None) == fix_scale
        delta_pose, delta_depth = schur_solve(sys, config)
        x_schur = flatten_step(sys, delta_pose, delta_depth)
        x_dense = dense_step(sys)
        np.testing.assert_allclose(x_schur, x_dense, rtol=1e-6, atol=1e-9 * np.abs(x_dense).max())

    def test_scale_constraint_holds(self, tiny_graph, rng):
        config = BAConfig(damping_init=1e-3)
        state = perturbed_state(tiny_graph, rng, depth_noise=0.1)
        sys = linearize(tiny_graph, state, config)
        _, delta_depth = schur_solve(sys, config)
        assert abs(float(np.sum(sys.scale_direction * delta_depth[0]))) < 1e-10 * np.abs(delta_depth[0]).sum()

    def test_zero_gradient_gives_zero_step(self, tiny_graph, rng):
        config = BAConfig(damping_init=1e-3)
        sys = linearize(tiny_graph, perturbed_state(tiny_graph, rng), config)
        sys = replace(
            sys,
            pose_gradient=np.zeros_like(sys.pose_gradient),
            depth_gradient={f: np.zeros_like(g) for f, g in sys.depth_gradient.items()},
        )
        delta_pose, delta_depth = schur_solve(sys, config)
        for v in (*delta_pose.values(), *delta_depth.values()):
            np.testing.assert_array_equal(v, 0.0)

    def test_all_frames_fixed_solves_depths_only(self, tiny_graph, rng):
        config = BAConfig(fixed_frame_ids=[0, 1, 2], damping_init=1e-3)
        sys = linearize(tiny_graph, perturbed_state(tiny_graph, rng, depth_noise=0.1), config)
        delta_pose, delta_depth = schur_solve(sys, config)
        assert delta_pose == {}
        for f, dD in delta_depth.items():
            np.testing.assert_allclose(dD, -sys.depth_gradient[f] / (sys.depth_hessian[f] + 1e-3), rtol=1e-12)

    def test_singular_reduced_system_raises(self):
        sys = LinearSystem(
            frame_ids=[0, 1],
            fixed_ids=frozenset([0]),
            pose_hessian=np.zeros((12, 12)),
            pose_gradient=np.ones(12),
            depth_hessian={0: np.ones((2, 2)), 1: np.ones((2, 2))},
            depth_gradient={0: np.zeros((2, 2)), 1: np.zeros((2, 2))},
            cross={},
            cost=1.0,
            num_residuals=4,
            damping=0.0,
        )
        with pytest.raises(SingularSystem):
            schur_solve(sys, BAConfig(damping_init=0.0))


# ---------------------------------------------------------------------------
# retract / ba_iterate
# ---------------------------------------------------------------------------


class TestRetract:
    def test_left_update_and_depth_clamp(self):
        config = BAConfig(depth_min=0.1, depth_max=10.0)
        state = BAState({0: Pose.identity()}, {0: np.full((2, 2), 5.0)})
        xi = np.array([0.0, 0.0, 0.1, 0.2, 0.0, 0.0])
        new = retract(state, {0: xi}, {0: np.array([[-100.0, 100.0], [0.5, 0.0]])}, config)
        np.testing.assert_allclose(new.poses[0].matrix(), exp(xi).matrix())
        np.testing.assert_allclose(new.depths[0], [[0.1, 10.0], [5.5, 5.0]])
        np.testing.assert_allclose(state.depths[0], 5.0)


class TestBAIterate:
    def test_fixed_point_at_ground_truth(self, plane_graph):
        state = plane_graph.state()
        new, trace = ba_iterate(plane_graph, state, BAConfig())
        assert trace.converged
        for f in state.poses:
            np.testing.assert_allclose(new.poses[f].matrix(), state.poses[f].matrix(), atol=1e-9)
            np.testing.assert_allclose(new.depths[f], state.depths[f], atol=1e-9)

    def test_cost_is_non_increasing(self, plane_graph, rng):
        state = perturbed_state(plane_graph, rng, angle_deg=2.0, translation_m=0.02, depth_noise=0.05)
        _, trace = ba_iterate(plane_graph, state, BAConfig(inner_ba_steps=6))
        costs = trace.costs
        assert all(b <= a for a, b in zip(costs, costs[1:]))
        assert trace.final_cost < trace.initial_cost

    def test_converges_from_perturbed_state(self, plane_scene, plane_graph, rng):
        state = perturbed_state(plane_graph, rng, angle_deg=2.0, translation_m=0.02, depth_noise=0.05)
        config = BAConfig(inner_ba_steps=2)
        for _ in range(10):
            state, _ = ba_iterate(plane_graph, state, config)
        plane_graph.apply_state(state)
        truth = {f: p for f, p in enumerate(plane_scene.poses)}
        assert keyframe_ate(plane_graph, truth) < 1e-4

    def test_fixed_frame_does_not_move(self, plane_graph, rng):
        state = perturbed_state(plane_graph, rng)
        new, _ = ba_iterate(plane_graph, state, BAConfig(inner_ba_steps=3))
        np.testing.assert_array_equal(new.poses[0].matrix(), state.poses[0].matrix())

    def test_geometry_term_changes_the_cost(self, plane_graph, rng):
        for edge in plane_graph.edges.values():
            edge.flow = edge.flow.with_flow(edge.flow.flow, 0.5)
        state = perturbed_state(plane_graph, rng)
        with_geo = total_cost(plane_graph, state, BAConfig(use_geometry=True))
        flow_only = total_cost(plane_graph, state, BAConfig(use_geometry=False))
        assert with_geo != flow_only
        ev = evaluate_edge((0, 1), state.poses, state.depths, plane_graph.edges[(0, 1)].flow, plane_graph.intrinsics)
        assert ev.geometry is not None

    def test_damping_exhaustion_carries_the_last_accepted_state(self, plane_graph, rng, monkeypatch):
        state = perturbed_state(plane_graph, rng)
        costs = iter([1.0] + [10.0] * 20)
        monkeypatch.setattr("src.ba.solver.total_cost", lambda *args, **kwargs: next(costs))
        with pytest.raises(MaxDampingExceeded) as info:
            ba_iterate(plane_graph, state, BAConfig(max_damping=1e-2))
        assert info.value.trace.damping_exhausted
        assert info.value.trace.final_cost == 1.0
        assert not any(s.accepted for s in info.value.trace.steps)
        for f in state.poses:
            np.testing.assert_array_equal(info.value.state.poses[f].matrix(), state.poses[f].matrix())
            np.testing.assert_array_equal(info.value.state.depths[f], state.depths[f])
