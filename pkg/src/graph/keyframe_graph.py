"""キーフレーム共視グラフと外側の改善ループ

外側ループ1回は、全エッジのフロー更新 → BA（``inner_ba_steps`` 回の減衰付きステップ）
→ 残差と信頼性マスクの再計算、の順に進む。エッジごとの処理はグラフのスナップショットを読み、
変更はフェーズの間でまとめて反映する。
"""

from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, Mapping

import numpy as np

from src.ba.residuals import DepthMap, Edge, EdgeResiduals, FlowField, evaluate_edge
from src.ba.solver import BAState, BATrace, ba_iterate
from src.errors import MaxDampingExceeded, NoNeighbors
from src.eval.metrics import Trajectory, ate_rmse
from src.frontend.flow import GeometryPrior, PriorNoiseModel, correlation_volume, predict_confidence, refine_flow
from src.frontend.reliability import ReliabilityMask, build_masks, mask_statistics
from src.geometry.camera import Intrinsics, induced_flow
from src.geometry.se3 import Pose, exp, log, relative
from src.schemas import KeyframePolicy, LoopConfig
from src.utils.logger import get_logger
from src.utils.timing import PhaseTimer, timed

logger = get_logger(__name__)

OUTER_ITERATION_TARGET_MS = 50.0


@dataclass
class Keyframe:
    frame_id: int
    timestamp: float
    pose: Pose  # world-to-camera
    depth: DepthMap
    features: np.ndarray  # (H, W, C)
    prior: GeometryPrior | None = None


@dataclass
class CovisEdge:
    source_id: int
    target_id: int
    flow: FlowField
    residuals: EdgeResiduals | None = None
    mask: ReliabilityMask | None = None
    tracking: np.ndarray | None = None  # (H, W) flow last set from geometry

    @property
    def key(self) -> Edge:
        return (self.source_id, self.target_id)


class CovisGraph:
    """キーフレームと有向共視エッジを保持するグラフ

    ``adjacency[i]`` は i の出力隣接ノード N(i)。
    """

    def __init__(self, intrinsics: Intrinsics):
        self.intrinsics = intrinsics
        self.nodes: dict[int, Keyframe] = {}
        self.edges: dict[Edge, CovisEdge] = {}
        self.adjacency: dict[int, set[int]] = {}
        self.timer = PhaseTimer()

    def __len__(self) -> int:
        return len(self.nodes)

    def add_keyframe(self, keyframe: Keyframe) -> None:
        if keyframe.frame_id in self.nodes:
            raise ValueError(f"keyframe {keyframe.frame_id} already exists")
        if keyframe.depth.shape != self.intrinsics.shape:
            raise ValueError(f"depth of keyframe {keyframe.frame_id} does not match {self.intrinsics.shape}")
        self.nodes[keyframe.frame_id] = keyframe
        self.adjacency[keyframe.frame_id] = set()

    def add_edge(self, flow: FlowField) -> CovisEdge:
        i, j = flow.edge
        if i == j:
            raise ValueError(f"self-edge on keyframe {i}")
        missing = [f for f in (i, j) if f not in self.nodes]
        if missing:
            raise ValueError(f"edge ({i}, {j}) references unknown keyframe(s) {missing}")
        edge = CovisEdge(i, j, flow)
        self.edges[(i, j)] = edge
        self.adjacency[i].add(j)
        return edge

    def neighbors(self, frame_id: int) -> list[int]:
        return sorted(self.adjacency.get(frame_id, ()))

    def frame_ids(self) -> list[int]:
        return sorted(self.nodes)

    def last_keyframe(self) -> Keyframe | None:
        if not self.nodes:
            return None
        return max(self.nodes.values(), key=lambda kf: kf.timestamp)

    def flow_edges(self) -> list[tuple[Edge, FlowField]]:
        return [(key, self.edges[key].flow) for key in sorted(self.edges)]

    @property
    def residuals(self) -> dict[Edge, EdgeResiduals]:
        return {key: e.residuals for key, e in sorted(self.edges.items()) if e.residuals is not None}

    @property
    def masks(self) -> dict[Edge, ReliabilityMask]:
        return {key: e.mask for key, e in sorted(self.edges.items()) if e.mask is not None}

    def state(self) -> BAState:
        return BAState(
            {f: kf.pose for f, kf in self.nodes.items()},
            {f: np.array(kf.depth.values) for f, kf in self.nodes.items()},
        )

    def apply_state(self, state: BAState) -> None:
        for f, kf in self.nodes.items():
            kf.pose = state.poses[f]
            kf.depth = DepthMap(state.depths[f], f)

    def trajectory(self) -> Trajectory:
        """キーフレーム軌跡（camera-to-world）"""
        ordered = sorted(self.nodes.values(), key=lambda kf: kf.timestamp)
        return Trajectory(np.array([kf.timestamp for kf in ordered]), tuple(kf.pose.inverse() for kf in ordered))

    def validate(self) -> None:
        """構造上の不変条件が崩れていればValueErrorを送出"""
        for (i, j), edge in self.edges.items():
            if i == j:
                raise ValueError(f"self-edge on keyframe {i}")
            if i not in self.nodes or j not in self.nodes:
                raise ValueError(f"edge ({i}, {j}) has a dangling endpoint")
            if edge.flow.edge != (i, j):
                raise ValueError(f"edge ({i}, {j}) carries the flow of {edge.flow.edge}")
        out = {f: set() for f in self.nodes}
        for i, j in self.edges:
            out[i].add(j)
        if out != self.adjacency:
            raise ValueError("adjacency index is out of sync with the edge set")


def build_edges(
    graph: CovisGraph | Iterable[int],
    window: int = 2,
    pattern: Literal["batch", "online"] = "batch",
    new_frame: int | None = None,
) -> set[Edge]:
    """有向共視エッジを列挙する

    batch: キーフレーム番号の差が ``window`` 以下の全順序対。
    online: ``new_frame``（既定は最新）と直近 ``window`` 個の先行キーフレームを双方向に結ぶ。
    """
    ids = graph.frame_ids() if isinstance(graph, CovisGraph) else sorted(graph)
    if len(ids) < 2:
        return set()
    if pattern == "batch":
        return {
            (ids[a], ids[b])
            for a in range(len(ids))
            for b in range(len(ids))
            if a != b and abs(a - b) <= window
        }
    new_frame = ids[-1] if new_frame is None else new_frame
    position = ids.index(new_frame)
    edges = set()
    for other in ids[max(0, position - window) : position]:
        edges.add((new_frame, other))
        edges.add((other, new_frame))
    return edges


@dataclass(frozen=True)
class FrameCandidate:
    frame_id: int
    timestamp: float
    pose: Pose
    features: np.ndarray
    prior: GeometryPrior | None = None


def estimate_mean_flow(graph: CovisGraph, candidate: FrameCandidate) -> float:
    """直前のキーフレームから候補への平均フロー量（px）。現在の推定値だけを使う"""
    last = graph.last_keyframe()
    if last is None:
        return float("inf")
    flow, valid = induced_flow(last.depth.values, relative(last.pose, candidate.pose), graph.intrinsics)
    valid &= graph.intrinsics.in_bounds(graph.intrinsics.pixel_grid() + flow)
    if not valid.any():
        return float("inf")
    return float(np.mean(np.linalg.norm(flow[valid], axis=-1)))


def admit_keyframe(candidate: FrameCandidate, graph: CovisGraph, policy: KeyframePolicy) -> bool:
    """平均フローがしきい値を超えればキーフレームとして採用（空グラフは常に採用）"""
    if not graph.nodes:
        return True
    mean_flow = estimate_mean_flow(graph, candidate)
    accepted = mean_flow > policy.flow_threshold
    logger.debug(f"frame {candidate.frame_id}: mean flow {mean_flow:.2f} px -> {'accept' if accepted else 'reject'}")
    return accepted


def constant_velocity_pose(graph: CovisGraph, timestamp: float | None = None) -> Pose:
    """直近2キーフレームから T_new = exp(s log(T_b T_a^-1)) T_b で外挿する

    ``s`` は時間比 (t_new - t_b) / (t_b - t_a)。``timestamp`` がNoneなら1。
    """
    ordered = sorted(graph.nodes.values(), key=lambda kf: kf.timestamp)
    if not ordered:
        return Pose.identity()
    if len(ordered) == 1:
        return ordered[-1].pose
    a, b = ordered[-2], ordered[-1]
    motion = b.pose.compose(a.pose.inverse())
    s = 1.0 if timestamp is None else (timestamp - b.timestamp) / (b.timestamp - a.timestamp)
    return exp(s * log(motion)).compose(b.pose)


def initial_depth(candidate: FrameCandidate, graph: CovisGraph) -> DepthMap:
    """事前デプスがあればそれを、なければ直前キーフレームのデプス中央値で埋めたマップを使う

    Raises:
        NoNeighbors: 事前デプスも既存キーフレームもない
    """
    if candidate.prior is not None:
        return DepthMap(candidate.prior.prior_depth, candidate.frame_id)
    last = graph.last_keyframe()
    if last is None:
        raise NoNeighbors(f"frame {candidate.frame_id} has neither a prior nor a previous keyframe")
    return DepthMap(np.full(graph.intrinsics.shape, last.depth.median()), candidate.frame_id)


def insert_keyframe(
    graph: CovisGraph,
    candidate: FrameCandidate,
    policy: KeyframePolicy,
    flow_for: Callable[[Edge], FlowField],
) -> bool:
    """``candidate`` を採用し、直近の先行キーフレームとオンラインで結ぶ

    新しい有向エッジの初期フローは ``flow_for`` が与える。
    """
    if not admit_keyframe(candidate, graph, policy):
        return False
    graph.add_keyframe(
        Keyframe(
            frame_id=candidate.frame_id,
            timestamp=candidate.timestamp,
            pose=candidate.pose,
            depth=initial_depth(candidate, graph),
            features=candidate.features,
            prior=candidate.prior,
        )
    )
    for edge in sorted(build_edges(graph, policy.online_k, "online", candidate.frame_id)):
        graph.add_edge(flow_for(edge))
    return True


def refresh_reliability(graph: CovisGraph, config: LoopConfig) -> dict[str, float]:
    """全エッジの残差とマスクを再計算し、マスク統計を返す"""
    state = graph.state()
    for key, edge in sorted(graph.edges.items()):
        evaluation = evaluate_edge(
            key,
            state.poses,
            state.depths,
            edge.flow,
            graph.intrinsics,
            tau=config.ba.geometry_tau,
            delta=config.ba.huber_delta,
            use_geometry=config.ba.use_geometry,
            z_min=config.ba.z_min,
        )
        edge.residuals = evaluation.residuals
    masks = build_masks(graph.residuals, config.reliability)
    for key, mask in masks.items():
        graph.edges[key].mask = mask
    return mask_statistics(masks, graph.residuals)


def _replacement_depth(keyframe: Keyframe) -> GeometryPrior:
    """キーフレームの現在のデプス推定（ノイズモデルは事前デプスのもの）"""
    noise = keyframe.prior.noise if keyframe.prior is not None else PriorNoiseModel()
    return GeometryPrior(np.array(keyframe.depth.values), keyframe.frame_id, noise)


def update_flows(graph: CovisGraph, config: LoopConfig) -> float:
    """全エッジを相関で改善し、最大のフロー変化量（px）を返す

    マスクは現在の残差から作る。マスクのないエッジがあれば先にrefresh_reliabilityを呼ぶ。
    """
    if any(edge.mask is None for edge in graph.edges.values()):
        refresh_reliability(graph, config)
    fe = config.frontend
    updates: dict[Edge, tuple[FlowField, np.ndarray]] = {}
    largest = 0.0
    masks = graph.masks
    for key, edge in sorted(graph.edges.items()):
        i, j = key
        src, dst = graph.nodes[i], graph.nodes[j]
        mask = masks[key].m
        geometry = _replacement_depth(src)
        corr = correlation_volume(src.features, dst.features, edge.flow, fe.radius)
        refined = refine_flow(
            corr,
            mask,
            geometry,
            relative(src.pose, dst.pose),
            graph.intrinsics,
            edge.flow,
            step_cap=fe.effective_step_cap,
            blend=fe.blend,
            subpixel_at_center=fe.subpixel_at_center,
            min_gain=fe.min_gain,
            match_tolerance=fe.match_tolerance,
            tracking=edge.tracking,
            track_radius=fe.track_radius,
            hold_tolerance=fe.hold_tolerance,
        )
        # flow that follows the geometry is not a measurement
        measured = mask & ~refined.tracking
        confidence = predict_confidence(
            corr,
            measured,
            fe.confidence_scale,
            fe.masked_confidence_cap,
            prior_confidence=geometry.noise.confidence,
            match_scale=fe.match_confidence_scale,
        )
        updates[key] = (refined.flow.with_flow(refined.flow.flow, confidence), refined.tracking)
        largest = max(largest, float(np.max(np.abs(refined.delta), initial=0.0)))
    for key, (flow, tracking) in updates.items():
        graph.edges[key].flow = flow
        graph.edges[key].tracking = tracking
    return largest


@dataclass
class IterationResult:
    cost: float
    ba: BATrace
    statistics: dict[str, float] = field(default_factory=dict)
    max_flow_delta: float = 0.0
    ate: float = float("nan")


def keyframe_ate(graph: CovisGraph, ground_truth: Mapping[int, Pose], with_scale: bool = True) -> float:
    """GTのworld-to-camera姿勢に対するキーフレーム位置のATE（3フレーム未満はNaN）"""
    ids = graph.frame_ids()
    if len(ids) < 3:
        return float("nan")
    est = np.array([graph.nodes[f].pose.center() for f in ids])
    gt = np.array([ground_truth[f].center() for f in ids])
    times = np.arange(len(ids), dtype=float)
    return ate_rmse(
        Trajectory(times, tuple(Pose(np.eye(3), p) for p in est)),
        Trajectory(times, tuple(Pose(np.eye(3), p) for p in gt)),
        with_scale=with_scale,
        max_gap=0.5,
    )


@timed("outer_iteration", budget_ms=OUTER_ITERATION_TARGET_MS)
def outer_iteration(
    graph: CovisGraph,
    config: LoopConfig,
    ground_truth: Mapping[int, Pose] | None = None,
) -> IterationResult:
    """外側ループ1回: フロー更新 → BA（inner_ba_steps回）→ 残差・マスク更新

    λが上限を超えたときはそこでBAを打ち切り、最後に受理した状態を使う
    （``result.ba.damping_exhausted`` が立つ）。

    Args:
        graph: 対象グラフ（その場で更新される）
        config: ループ設定
        ground_truth: 指定時はキーフレームATEを計算

    Returns:
        IterationResult: BAコスト、マスク統計、ATE

    Raises:
        SingularSystem: BAの縮約系が特異
    """
    max_delta = update_flows(graph, config)
    try:
        state, trace = ba_iterate(graph, graph.state(), config.ba)
    except MaxDampingExceeded as e:
        logger.warning(f"BA stopped early: {e}")
        state, trace = e.state, e.trace
    graph.apply_state(state)
    stats = refresh_reliability(graph, config)
    ate = keyframe_ate(graph, ground_truth) if ground_truth is not None else float("nan")
    logger.debug(
        f"outer iteration: cost {trace.initial_cost:.4e} -> {trace.final_cost:.4e}, "
        f"max flow change {max_delta:.3f} px, mask ratio {stats['mask_ratio']:.3f}"
    )
    return IterationResult(cost=trace.final_cost, ba=trace, statistics=stats, max_flow_delta=max_delta, ate=ate)
