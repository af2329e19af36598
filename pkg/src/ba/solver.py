"""キーフレーム姿勢と密なデプスに対する減衰付きGauss-Newton

正規方程式は、密な姿勢ブロックB（6F x 6F）、画素ごとに1スカラーのデプスブロックC、
（姿勢フレーム, 画素）ごとの6ベクトル結合Eからなる。デプスはSchur補行列

    S = B + lambda I - E C^-1 E^T,   b = g_T - E C^-1 g_D

で消去し、後退代入で戻す。固定フレームが1つのときは、アンカーフレームのデプス増分への
線形拘束（a^T dD = 0, a = -1/D^2。平均逆デプスを保つ）で単眼スケールを固定し、
同じ縮約の中で消去する。
"""

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Protocol

import numpy as np
from scipy import linalg

from src.ba.residuals import Edge, FlowField, evaluate_edge
from src.errors import EmptySystem, MaxDampingExceeded, SingularSystem
from src.geometry.camera import Intrinsics
from src.geometry.se3 import Pose, exp
from src.schemas import BAConfig
from src.utils.logger import get_logger

logger = get_logger(__name__)


class FlowGraph(Protocol):
    """ソルバーが使う共視グラフの読み取り専用ビュー"""

    intrinsics: Intrinsics

    def frame_ids(self) -> list[int]: ...

    def flow_edges(self) -> list[tuple[Edge, FlowField]]: ...


@dataclass
class BAState:
    poses: dict[int, Pose]
    depths: dict[int, np.ndarray]

    def copy(self) -> "BAState":
        return BAState(dict(self.poses), {k: np.array(v, dtype=float) for k, v in self.depths.items()})


@dataclass
class LinearSystem:
    frame_ids: list[int]
    fixed_ids: frozenset[int]
    pose_hessian: np.ndarray  # (6F, 6F)
    pose_gradient: np.ndarray  # (6F,)
    depth_hessian: dict[int, np.ndarray]  # (H, W)
    depth_gradient: dict[int, np.ndarray]  # (H, W)
    cross: dict[tuple[int, int], np.ndarray]  # (pose frame, depth frame) -> (H, W, 6)
    cost: float
    num_residuals: int
    damping: float = 0.0
    scale_anchor: int | None = None
    scale_direction: np.ndarray | None = None  # (H, W) on the anchor frame

    def index(self, frame_id: int) -> int:
        return self.frame_ids.index(frame_id)

    def pose_block(self, a: int, b: int) -> np.ndarray:
        ia, ib = 6 * self.index(a), 6 * self.index(b)
        return self.pose_hessian[ia : ia + 6, ib : ib + 6]

    def pose_grad(self, a: int) -> np.ndarray:
        ia = 6 * self.index(a)
        return self.pose_gradient[ia : ia + 6]

    @property
    def free_ids(self) -> list[int]:
        return [f for f in self.frame_ids if f not in self.fixed_ids]

    def gradient_norm(self) -> float:
        """自由変数についての勾配ノルム"""
        sq = sum(float(np.sum(self.pose_grad(f) ** 2)) for f in self.free_ids)
        sq += sum(float(np.sum(g**2)) for g in self.depth_gradient.values())
        return float(np.sqrt(sq))

    def to_dense(self) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """[自由姿勢 | 全デプス] についての減衰なしの密な (H, g) とスケール拘束行

        デプス変数はフレームID順、その中は行優先の画素順。
        """
        free = self.free_ids
        depth_frames = sorted(self.depth_hessian)
        sizes = {f: self.depth_hessian[f].size for f in depth_frames}
        n_pose = 6 * len(free)
        offsets, cursor = {}, n_pose
        for f in depth_frames:
            offsets[f] = cursor
            cursor += sizes[f]
        H = np.zeros((cursor, cursor))
        g = np.zeros(cursor)
        for ia, a in enumerate(free):
            g[6 * ia : 6 * ia + 6] = self.pose_grad(a)
            for ib, b in enumerate(free):
                H[6 * ia : 6 * ia + 6, 6 * ib : 6 * ib + 6] = self.pose_block(a, b)
        for f in depth_frames:
            sl = slice(offsets[f], offsets[f] + sizes[f])
            H[sl, sl] = np.diag(self.depth_hessian[f].ravel())
            g[sl] = self.depth_gradient[f].ravel()
        for (a, f), E in self.cross.items():
            if a not in free:
                continue
            ia = 6 * free.index(a)
            block = E.reshape(-1, 6)
            H[ia : ia + 6, offsets[f] : offsets[f] + sizes[f]] = block.T
            H[offsets[f] : offsets[f] + sizes[f], ia : ia + 6] = block
        constraint = None
        if self.scale_anchor is not None:
            constraint = np.zeros(cursor)
            f = self.scale_anchor
            constraint[offsets[f] : offsets[f] + sizes[f]] = self.scale_direction.ravel()
        return H, g, constraint


@dataclass
class ReducedSystem:
    free_ids: list[int]
    matrix: np.ndarray
    rhs: np.ndarray
    depth_inverse: dict[int, np.ndarray]
    anchor_u: np.ndarray | None = None
    anchor_norm: float = 0.0


@dataclass
class StepRecord:
    step: int
    cost_before: float
    cost_after: float
    damping: float
    accepted: bool
    attempts: int


@dataclass
class BATrace:
    steps: list[StepRecord] = field(default_factory=list)
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    damping_exhausted: bool = False

    @property
    def costs(self) -> list[float]:
        return [self.initial_cost] + [s.cost_after for s in self.steps if s.accepted]


def _edge_eval(graph: FlowGraph, state: BAState, config: BAConfig, edge: Edge, flow: FlowField, jacobians: bool):
    return evaluate_edge(
        edge,
        state.poses,
        state.depths,
        flow,
        graph.intrinsics,
        tau=config.geometry_tau,
        delta=config.huber_delta,
        use_geometry=config.use_geometry,
        z_min=config.z_min,
        jacobians=jacobians,
    )


def total_cost(graph: FlowGraph, state: BAState, config: BAConfig) -> float:
    """全エッジの画素ごとの結合コストの総和"""
    return float(
        sum(np.sum(_edge_eval(graph, state, config, edge, flow, False).cost.cost) for edge, flow in graph.flow_edges())
    )


def _scale_anchor(frame_ids: Iterable[int], config: BAConfig) -> int | None:
    frame_ids = list(frame_ids)
    fixed = [f for f in frame_ids if f in config.fixed_frame_ids]
    free = [f for f in frame_ids if f not in config.fixed_frame_ids]
    if config.fix_scale and len(fixed) == 1 and free:
        return fixed[0]
    return None


def linearize(graph: FlowGraph, state: BAState, config: BAConfig) -> LinearSystem:
    """全エッジの有効画素についてJ^T W JとJ^T W rを積算する

    Raises:
        EmptySystem: 有効な残差が一つもない
    """
    frame_ids = sorted(graph.frame_ids())
    index = {f: n for n, f in enumerate(frame_ids)}
    F = len(frame_ids)
    shape = next(iter(state.depths.values())).shape
    B = np.zeros((6 * F, 6 * F))
    g_T = np.zeros(6 * F)
    C = {f: np.zeros(shape) for f in frame_ids}
    g_D = {f: np.zeros(shape) for f in frame_ids}
    cross: dict[tuple[int, int], np.ndarray] = {}
    cost = 0.0
    count = 0

    def accumulate(i, j, r, w, Jd, Js, Jt):
        nonlocal count
        Jw_s = Js * w[..., None, None]
        Jw_t = Jt * w[..., None, None]
        si, sj = slice(6 * index[i], 6 * index[i] + 6), slice(6 * index[j], 6 * index[j] + 6)
        B[si, si] += np.einsum("hwka,hwkb->ab", Jw_s, Js)
        B[sj, sj] += np.einsum("hwka,hwkb->ab", Jw_t, Jt)
        Bst = np.einsum("hwka,hwkb->ab", Jw_s, Jt)
        B[si, sj] += Bst
        B[sj, si] += Bst.T
        g_T[si] += np.einsum("hwka,hwk->a", Jw_s, r)
        g_T[sj] += np.einsum("hwka,hwk->a", Jw_t, r)
        C[i] += w * np.sum(Jd * Jd, axis=-1)
        g_D[i] += w * np.sum(Jd * r, axis=-1)
        for frame, Jw in ((i, Jw_s), (j, Jw_t)):
            key = (frame, i)
            contribution = np.einsum("hwka,hwk->hwa", Jw, Jd)
            cross[key] = cross[key] + contribution if key in cross else contribution
        count += int(np.count_nonzero(w > 0))

    for (i, j), flow in graph.flow_edges():
        ev = _edge_eval(graph, state, config, (i, j), flow, True)
        cost += float(np.sum(ev.cost.cost))
        f = ev.flow
        accumulate(i, j, f.residual, ev.cost.flow_weight, f.j_depth, f.j_source, f.j_target)
        if ev.geometry is not None:
            geo = ev.geometry
            accumulate(i, j, geo.error, ev.cost.geo_weight, geo.j_depth, geo.j_source, geo.j_target)

    if count == 0:
        raise EmptySystem("no valid residuals in the covisibility graph")

    anchor = _scale_anchor(frame_ids, config)
    direction = -1.0 / state.depths[anchor] ** 2 if anchor is not None else None
    return LinearSystem(
        frame_ids=frame_ids,
        fixed_ids=frozenset(f for f in frame_ids if f in config.fixed_frame_ids),
        pose_hessian=B,
        pose_gradient=g_T,
        depth_hessian=C,
        depth_gradient=g_D,
        cross=cross,
        cost=cost,
        num_residuals=count,
        damping=config.damping_init,
        scale_anchor=anchor,
        scale_direction=direction,
    )


def reduce(sys: LinearSystem) -> ReducedSystem:
    """Eliminate depths: S = B + lambda I - E C^-1 E^T, b = g_T - E C^-1 g_D."""
    lam = sys.damping
    free = sys.free_ids
    n = len(free)
    S = np.zeros((6 * n, 6 * n))
    b = np.zeros(6 * n)
    for ia, a in enumerate(free):
        b[6 * ia : 6 * ia + 6] = sys.pose_grad(a)
        for ib, c in enumerate(free):
            S[6 * ia : 6 * ia + 6, 6 * ib : 6 * ib + 6] = sys.pose_block(a, c)
    S += lam * np.eye(6 * n)

    depth_inverse = {}
    anchor_u, anchor_norm = None, 0.0
    for f, Cf in sys.depth_hessian.items():
        damped = Cf + lam
        Cinv = np.where(damped > 0, 1.0 / np.where(damped > 0, damped, 1.0), 0.0)
        depth_inverse[f] = Cinv
        coupled = [(ia, sys.cross[(a, f)].reshape(-1, 6)) for ia, a in enumerate(free) if (a, f) in sys.cross]
        cinv = Cinv.ravel()
        gd = sys.depth_gradient[f].ravel()
        for ia, Ea in coupled:
            EaC = Ea * cinv[:, None]
            b[6 * ia : 6 * ia + 6] -= EaC.T @ gd
            for ib, Eb in coupled:
                S[6 * ia : 6 * ia + 6, 6 * ib : 6 * ib + 6] -= EaC.T @ Eb

        if f == sys.scale_anchor:
            a_vec = sys.scale_direction.ravel()
            u = cinv * a_vec
            sigma = float(a_vec @ u)
            if sigma > 0:
                anchor_u, anchor_norm = u, sigma
                ug = float(u @ gd)
                ys = {ia: Ea.T @ u for ia, Ea in coupled}
                for ia, ya in ys.items():
                    b[6 * ia : 6 * ia + 6] += ya * ug / sigma
                    for ib, yb in ys.items():
                        S[6 * ia : 6 * ia + 6, 6 * ib : 6 * ib + 6] += np.outer(ya, yb) / sigma

    return ReducedSystem(free, S, b, depth_inverse, anchor_u, anchor_norm)


def schur_solve(sys: LinearSystem, config: BAConfig) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """減衰付き正規方程式を解き、（自由フレームごとのdT, フレームごとのdD）を返す

    Raises:
        SingularSystem: 縮約後のポーズ系が正定値でない
    """
    red = reduce(sys)
    x = np.zeros(0)
    if red.matrix.size:
        S = 0.5 * (red.matrix + red.matrix.T)
        try:
            factor = linalg.cho_factor(S, lower=True, check_finite=True)
            x = linalg.cho_solve(factor, -red.rhs)
        except (linalg.LinAlgError, ValueError) as e:
            raise SingularSystem(f"reduced pose system is not positive definite: {e}") from e
        if not np.all(np.isfinite(x)):
            raise SingularSystem("reduced pose system produced a non-finite step")
        scale = max(np.linalg.norm(red.rhs), 1e-300)
        rel = np.linalg.norm(S @ x + red.rhs) / scale
        if rel > 1e-8:
            logger.debug(f"reduced solve relative residual {rel:.2e}")

    delta_pose = {f: x[6 * n : 6 * n + 6].copy() for n, f in enumerate(red.free_ids)}
    delta_depth = {}
    for f, Cinv in red.depth_inverse.items():
        rhs = -sys.depth_gradient[f].ravel()
        for n, a in enumerate(red.free_ids):
            if (a, f) in sys.cross:
                rhs -= sys.cross[(a, f)].reshape(-1, 6) @ delta_pose[a]
        d = Cinv.ravel() * rhs
        if f == sys.scale_anchor and red.anchor_u is not None:
            d -= red.anchor_u * float(red.anchor_u @ rhs) / red.anchor_norm
        delta_depth[f] = d.reshape(Cinv.shape)
    return delta_pose, delta_depth


def retract(state: BAState, delta_pose: Mapping[int, np.ndarray], delta_depth: Mapping[int, np.ndarray], config: BAConfig) -> BAState:
    """T <- exp(dT) T, D <- clip(D + dD)."""
    poses = dict(state.poses)
    for f, xi in delta_pose.items():
        poses[f] = exp(xi).compose(poses[f])
    depths = dict(state.depths)
    for f, dD in delta_depth.items():
        depths[f] = np.clip(state.depths[f] + dD, config.depth_min, config.depth_max)
    return BAState(poses, depths)


def _step_norm(delta_pose, delta_depth) -> float:
    sq = sum(float(np.sum(v**2)) for v in delta_pose.values())
    sq += sum(float(np.sum(v**2)) for v in delta_depth.values())
    return float(np.sqrt(sq))


def ba_iterate(graph: FlowGraph, state: BAState, config: BAConfig) -> tuple[BAState, BATrace]:
    """線形化 → 求解 → リトラクトを ``config.inner_ba_steps`` 回まわす

    総コストが増えないステップだけを受理する。増えたらλを上げ、同じ線形化から解き直す。

    Raises:
        SingularSystem: 縮約系が特異
        MaxDampingExceeded: λが上限を超えた（最後に受理した状態を保持）
    """
    trace = BATrace()
    lam = config.damping_init
    current = state
    cost = total_cost(graph, current, config)
    trace.initial_cost = cost

    for step in range(config.inner_ba_steps):
        if cost <= config.cost_tol:
            trace.converged = True
            break
        sys = linearize(graph, current, config)
        if sys.gradient_norm() < config.gradient_tol:
            logger.debug(f"BA step {step}: gradient {sys.gradient_norm():.2e} below tolerance")
            trace.converged = True
            break

        attempts = 0
        while True:
            attempts += 1
            delta_pose, delta_depth = schur_solve(replace(sys, damping=lam), config)
            candidate = retract(current, delta_pose, delta_depth, config)
            new_cost = total_cost(graph, candidate, config)
            if new_cost <= cost:
                logger.debug(f"BA step {step}: cost {cost:.6e} -> {new_cost:.6e} (lambda={lam:.1e})")
                trace.steps.append(StepRecord(step, cost, new_cost, lam, True, attempts))
                current, cost = candidate, new_cost
                lam *= config.damping_decrease
                break
            stalled = new_cost - cost <= config.stall_tol * cost
            if stalled or _step_norm(delta_pose, delta_depth) < config.step_tol:
                trace.steps.append(StepRecord(step, cost, cost, lam, False, attempts))
                trace.converged = True
                break
            lam *= config.damping_increase
            if lam > config.max_damping:
                trace.final_cost = cost
                trace.damping_exhausted = True
                raise MaxDampingExceeded(
                    f"damping exceeded {config.max_damping:.0e} at BA step {step}", state=current, trace=trace
                )
            if attempts == 4:
                logger.warning(f"BA step {step}: {attempts} rejected steps, lambda={lam:.1e}")
        if trace.converged:
            break

    trace.final_cost = cost
    return current, trace
