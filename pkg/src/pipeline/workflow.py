"""langgraphのStateGraphによる実験の進行管理

build_scene -> init_graph -> iterate（反復が残っている間ループ）-> evaluate -> write_artifacts。
失敗したノードはメッセージを ``state["error"]`` に入れてENDへ進み、``run`` が元の例外を送出し直す。
"""

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import TypedDict

import numpy as np
from langgraph.graph import END, StateGraph

from src.ba.residuals import DepthMap, Edge, FlowField
from src.config import settings
from src.errors import BiconError, IoError
from src.eval.metrics import (
    PointCloud,
    Trajectory,
    align,
    auc,
    auc_thresholds,
    cloud_metrics,
    depth_error,
    translation_errors,
)
from src.fileio.ply import export_ply
from src.fileio.report import write_ablation_csv, write_gnuplot, write_summary, write_trace_csv
from src.fileio.trajectory import write_trajectory
from src.frontend.flow import GeometryPrior, PriorNoiseModel
from src.geometry.camera import Intrinsics, backproject
from src.geometry.se3 import Pose, perturb
from src.graph.keyframe_graph import (
    CovisGraph,
    FrameCandidate,
    Keyframe,
    build_edges,
    constant_velocity_pose,
    insert_keyframe,
    keyframe_ate,
    outer_iteration,
    refresh_reliability,
)
from src.schemas import AblationRow, AblationSwitches, ExperimentConfig, FinalMetrics, RunReport, TraceRow
from src.synth.corruption import CorruptionInputs, corrupt, edge_seed, frame_seed, pose_seed
from src.synth.world import Features, GroundTruthFlow, SynthScene, gt_flow, gt_point_cloud, make_scene, render_depth, render_features
from src.utils.logger import StructuredLogger, get_logger
from src.utils.timing import PhaseTimer, timed

logger = get_logger(__name__)

RESTORED_THRESHOLD_PX = 1.0


@dataclass
class GroundTruth:
    poses: dict[int, Pose]
    timestamps: np.ndarray
    depths: dict[int, DepthMap]
    observed: dict[int, np.ndarray]
    features: dict[int, Features]
    flows: dict[Edge, GroundTruthFlow] = field(default_factory=dict)
    corrupted: dict[Edge, np.ndarray] = field(default_factory=dict)

    def trajectory(self) -> Trajectory:
        return Trajectory(self.timestamps, tuple(p.inverse() for p in self.poses.values()))


class ExperimentState(TypedDict):
    """ワークフロー状態"""

    experiment: ExperimentConfig
    scene: SynthScene | None
    truth: GroundTruth | None
    graph: CovisGraph | None
    iteration: int
    trace: list
    metrics: FinalMetrics | None
    output_dir: Path | None
    error: str
    failure: BaseException | None


def render_ground_truth(scene: SynthScene, config: ExperimentConfig) -> GroundTruth:
    depths, observed, features = {}, {}, {}
    for f, pose in enumerate(scene.poses):
        depths[f], observed[f] = render_depth(scene, pose, frame_id=f)
        features[f] = render_features(scene, pose, f, noise=config.frontend.feature_noise)
    return GroundTruth(dict(enumerate(scene.poses)), np.array(scene.timestamps), depths, observed, features)


def input_flow(scene: SynthScene, truth: GroundTruth, edge: Edge, config: ExperimentConfig) -> FlowField:
    """1エッジ分の劣化させたGTフロー。GTフローと劣化マスクは ``truth`` に記録する"""
    i, j = edge
    gt = gt_flow(scene, truth.poses[i], truth.poses[j], source_id=i, target_id=j)
    truth.flows[edge] = gt
    result = corrupt(
        CorruptionInputs(flow=gt.flow, occluded=gt.occluded, textureless=truth.features[i].textureless),
        config.corruption,
        edge_seed(config.seed, i, j),
    )
    truth.corrupted[edge] = result.corrupted
    return result.flow.with_flow(result.flow.flow, np.ones(result.flow.flow.shape[:2]))


def make_prior(truth: GroundTruth, frame_id: int, config: ExperimentConfig) -> GeometryPrior:
    result = corrupt(CorruptionInputs(depth=truth.depths[frame_id].values), config.corruption, frame_seed(config.seed, frame_id))
    noise = PriorNoiseModel(fraction=config.corruption.depth_noise_fraction)
    return GeometryPrior(result.prior_depth, frame_id, noise)


def initial_pose(truth: GroundTruth, frame_id: int, config: ExperimentConfig) -> Pose:
    """ゲージ固定フレームはGT、それ以外はGTに固定量のランダム摂動を加えた姿勢"""
    pose = truth.poses[frame_id]
    if frame_id in config.ba.fixed_frame_ids:
        return pose
    rng = np.random.default_rng(pose_seed(config.seed, frame_id))
    return perturb(pose, rng, np.deg2rad(config.pose_noise_deg), config.pose_noise_m)


def build_batch_graph(scene: SynthScene, truth: GroundTruth, config: ExperimentConfig) -> CovisGraph:
    graph = CovisGraph(scene.intrinsics)
    for f in range(scene.num_frames):
        prior = make_prior(truth, f, config)
        graph.add_keyframe(
            Keyframe(
                frame_id=f,
                timestamp=float(truth.timestamps[f]),
                pose=initial_pose(truth, f, config),
                depth=DepthMap(prior.prior_depth, f),
                features=truth.features[f].values,
                prior=prior,
            )
        )
    for edge in sorted(build_edges(graph, config.keyframes.window, "batch")):
        graph.add_edge(input_flow(scene, truth, edge, config))
    return graph


def build_online_graph(scene: SynthScene, truth: GroundTruth, config: ExperimentConfig) -> CovisGraph:
    """逐次採用。最初の2キーフレーム以降の姿勢は等速外挿で初期化する"""
    graph = CovisGraph(scene.intrinsics)
    for f in range(scene.num_frames):
        t = float(truth.timestamps[f])
        pose = initial_pose(truth, f, config) if len(graph) < 2 else constant_velocity_pose(graph, t)
        candidate = FrameCandidate(f, t, pose, truth.features[f].values, make_prior(truth, f, config))
        insert_keyframe(graph, candidate, config.keyframes, lambda edge: input_flow(scene, truth, edge, config))
    logger.info(f"online admission kept {len(graph)}/{scene.num_frames} frames as keyframes")
    return graph


def flow_error_statistics(graph: CovisGraph, truth: GroundTruth) -> tuple[float, float]:
    """Mean flow error over GT-visible pixels and the fraction of corrupted pixels within 1 px."""
    errors, restored, corrupted_total = [], 0, 0
    for key, edge in sorted(graph.edges.items()):
        gt = truth.flows[key]
        visible = gt.visible
        err = np.linalg.norm(edge.flow.flow - gt.flow.flow, axis=-1)
        errors.append(err[visible])
        corrupted = truth.corrupted[key] & visible
        corrupted_total += int(np.count_nonzero(corrupted))
        restored += int(np.count_nonzero(err[corrupted] < RESTORED_THRESHOLD_PX))
    pooled = np.concatenate(errors) if errors else np.zeros(0)
    mean_error = float(pooled.mean()) if pooled.size else 0.0
    return mean_error, (restored / corrupted_total if corrupted_total else 1.0)


def keyframe_cloud(
    poses: dict[int, Pose],
    depths: dict[int, np.ndarray],
    observed: dict[int, np.ndarray],
    k: Intrinsics,
    stride: int = 1,
) -> np.ndarray:
    """指定フレームで観測された全画素のワールド点"""
    grid = k.pixel_grid()[::stride, ::stride]
    clouds = []
    for f in sorted(poses):
        sel = observed[f][::stride, ::stride]
        d = np.asarray(depths[f])[::stride, ::stride][sel]
        clouds.append(poses[f].inverse().apply(backproject(grid[sel], d, k)))
    return np.concatenate(clouds, axis=0) if clouds else np.zeros((0, 3))


@dataclass
class Evaluation:
    metrics: FinalMetrics
    estimated: Trajectory
    estimated_cloud: np.ndarray
    gt_cloud: np.ndarray


def evaluate_graph(graph: CovisGraph, truth: GroundTruth, config: ExperimentConfig) -> Evaluation:
    """最終評価: Sim(3)アライメント後のATE/AUC、点群指標、デプス誤差

    Raises:
        TooFewPairs: 対応付けられたポーズが3未満
        EmptyCloud: 観測画素がない
    """
    ev = config.eval
    est = graph.trajectory()
    gt = truth.trajectory()
    sim = align(est, gt, ev.with_scale, ev.max_time_gap)
    errors = translation_errors(est, gt, ev.with_scale, ev.max_time_gap)

    ids = graph.frame_ids()
    observed = {f: truth.observed[f] for f in ids}
    est_cloud = sim.apply(
        keyframe_cloud(
            {f: graph.nodes[f].pose for f in ids},
            {f: graph.nodes[f].depth.values for f in ids},
            observed,
            graph.intrinsics,
            ev.cloud_stride,
        )
    )
    gt_cloud = keyframe_cloud(
        {f: truth.poses[f] for f in ids},
        {f: truth.depths[f].values for f in ids},
        observed,
        graph.intrinsics,
        ev.cloud_stride,
    )
    cloud = cloud_metrics(PointCloud(est_cloud), PointCloud(gt_cloud), ev.cloud_clip)
    metrics = FinalMetrics(
        ate=float(np.sqrt(np.mean(errors**2))),
        auc=auc(errors, auc_thresholds(ev.auc_max_threshold, ev.auc_thresholds)),
        accuracy=cloud.accuracy,
        completion=cloud.completion,
        chamfer=cloud.chamfer,
        depth_error=depth_error(
            {f: graph.nodes[f].depth.values for f in ids},
            {f: truth.depths[f].values for f in ids},
            observed,
        ),
    )
    return Evaluation(metrics, est, est_cloud, gt_cloud)


def resolve_output_dir(config: ExperimentConfig, output_dir: str | Path | None = None) -> Path:
    if output_dir is not None:
        return Path(output_dir)
    if config.output_dir is not None:
        return Path(config.output_dir)
    return Path(settings.BICON_OUTPUT_DIR) / config.name


class ExperimentWorkflow:
    """合成実験ワークフロー"""

    def __init__(self, write: bool = True):
        self.write = write
        self.timer = PhaseTimer()
        self.evaluation: Evaluation | None = None
        self.workflow = self._build_workflow()

    def _build_workflow(self):
        """LangGraphワークフローを構築"""

        workflow = StateGraph(ExperimentState)

        workflow.add_node("build_scene", self._build_scene)
        workflow.add_node("init_graph", self._init_graph)
        workflow.add_node("iterate", self._iterate)
        workflow.add_node("evaluate", self._evaluate)
        workflow.add_node("write_artifacts", self._write_artifacts)

        workflow.set_entry_point("build_scene")
        workflow.add_conditional_edges(
            "build_scene", lambda s: "fail" if s.get("error") else "next", {"next": "init_graph", "fail": END}
        )
        workflow.add_conditional_edges(
            "init_graph", self._should_iterate, {"iterate": "iterate", "evaluate": "evaluate", "fail": END}
        )
        workflow.add_conditional_edges(
            "iterate", self._should_iterate, {"iterate": "iterate", "evaluate": "evaluate", "fail": END}
        )
        workflow.add_conditional_edges(
            "evaluate",
            lambda s: "fail" if s.get("error") else ("write" if self.write else "done"),
            {"write": "write_artifacts", "done": END, "fail": END},
        )
        workflow.add_edge("write_artifacts", END)

        return workflow.compile()

    def _fail(self, state: ExperimentState, phase: str, e: Exception) -> ExperimentState:
        state["error"] = f"{phase} failed: {e}"
        state["failure"] = e
        if isinstance(e, BiconError):
            logger.error(state["error"])
        else:
            logger.error(state["error"], exc_info=True)
        return state

    @timed("build_scene")
    def _build_scene(self, state: ExperimentState) -> ExperimentState:
        """シーンとGTを生成"""
        try:
            config = state["experiment"]
            scene = make_scene(
                config.scene, config.trajectory, config.num_frames, config.intrinsics, config.seed, textureless=config.textureless_region
            )
            state["scene"] = scene
            state["truth"] = render_ground_truth(scene, config)
            logger.info(f"scene '{config.scene}' / '{config.trajectory}' with {scene.num_frames} frames ready")
        except Exception as e:
            return self._fail(state, "build_scene", e)
        return state

    @timed("init_graph")
    def _init_graph(self, state: ExperimentState) -> ExperimentState:
        """入力フローの劣化・初期姿勢・事前デプスからグラフを構築"""
        try:
            config = state["experiment"]
            if config.keyframes.mode == "online":
                graph = build_online_graph(state["scene"], state["truth"], config)
            else:
                graph = build_batch_graph(state["scene"], state["truth"], config)
            graph.validate()
            stats = refresh_reliability(graph, config.loop_config())
            state["graph"] = graph
            logger.info(
                f"graph: {len(graph)} keyframes, {len(graph.edges)} edges, "
                f"initial mask ratio {stats['mask_ratio']:.3f}"
            )
        except Exception as e:
            return self._fail(state, "init_graph", e)
        return state

    def _should_iterate(self, state: ExperimentState) -> str:
        if state.get("error"):
            return "fail"
        if state["iteration"] < state["experiment"].iterations:
            return "iterate"
        return "evaluate"

    @timed("iterate")
    def _iterate(self, state: ExperimentState) -> ExperimentState:
        """外側ループ1回"""
        try:
            config = state["experiment"]
            graph, truth = state["graph"], state["truth"]
            result = outer_iteration(graph, config.loop_config())
            graph.validate()
            state["iteration"] += 1
            mean_error, restored = flow_error_statistics(graph, truth)
            row = TraceRow(
                iteration=state["iteration"],
                cost=result.cost,
                ate=keyframe_ate(graph, truth.poses, config.eval.with_scale),
                mean_flow_error=mean_error,
                corrupted_restored=restored,
                damping_exhausted=result.ba.damping_exhausted,
                **result.statistics,
            )
            state["trace"].append(row)
            StructuredLogger.log_iteration(row.iteration, row.model_dump(exclude={"iteration"}))
            logger.info(
                f"[{row.iteration}/{config.iterations}] cost={row.cost:.4e} ate={row.ate:.3e} "
                f"flow_err={row.mean_flow_error:.3f}px restored={row.corrupted_restored:.3f}"
            )
        except Exception as e:
            return self._fail(state, "iterate", e)
        return state

    @timed("evaluate")
    def _evaluate(self, state: ExperimentState) -> ExperimentState:
        """GTに対する最終評価"""
        try:
            self.evaluation = evaluate_graph(state["graph"], state["truth"], state["experiment"])
            state["metrics"] = self.evaluation.metrics
        except Exception as e:
            return self._fail(state, "evaluate", e)
        return state

    def _report(self, state: ExperimentState) -> RunReport:
        timings = self.timer.summary_ms()
        if state.get("graph") is not None:
            timings.update(state["graph"].timer.summary_ms())
        return RunReport(
            name=state["experiment"].name,
            trace=state["trace"],
            metrics=state["metrics"],
            config=state["experiment"],
            timings_ms=timings,
            output_dir=str(state["output_dir"]) if state.get("output_dir") else None,
        )

    @timed("write_artifacts")
    def _write_artifacts(self, state: ExperimentState) -> ExperimentState:
        """CSV・軌跡・PLY・サマリーを書き出す"""
        try:
            out = state["output_dir"]
            out.mkdir(parents=True, exist_ok=True)
            write_trace_csv(state["trace"], out / "trace.csv")
            write_gnuplot(state["trace"], out / "trace.dat")
            write_trajectory(self.evaluation.estimated, out / "trajectory_est.txt")
            write_trajectory(state["truth"].trajectory(), out / "trajectory_gt.txt")
            export_ply(self.evaluation.estimated_cloud, out / "cloud_est.ply")
            export_ply(self.evaluation.gt_cloud, out / "cloud_gt.ply")
            write_summary(self._report(state), out / "summary.txt")
            logger.info(f"artifacts written to {out}")
        except Exception as e:
            return self._fail(state, "write_artifacts", e)
        return state

    def run(self, config: ExperimentConfig, output_dir: str | Path | None = None) -> RunReport:
        """ワークフローを実行

        Args:
            config: 実験設定
            output_dir: 出力先（省略時は設定・環境変数から決定）

        Returns:
            RunReport: トレースと最終指標

        Raises:
            BiconError: 各フェーズのエラーをそのまま送出
        """
        initial_state = ExperimentState(
            experiment=config,
            scene=None,
            truth=None,
            graph=None,
            iteration=0,
            trace=[],
            metrics=None,
            output_dir=resolve_output_dir(config, output_dir),
            error="",
            failure=None,
        )
        result = self.workflow.invoke(initial_state, config={"recursion_limit": config.iterations + 10})
        if result.get("error"):
            StructuredLogger.log_run(config.name, False, {"error": result["error"]})
            raise result["failure"]
        report = self._report(result)
        StructuredLogger.log_run(config.name, True, report.metrics.model_dump())
        return report


def run_experiment(config: ExperimentConfig, output_dir: str | Path | None = None, write: bool = True) -> RunReport:
    return ExperimentWorkflow(write=write).run(config, output_dir)


ABLATION_GRID = [
    AblationSwitches(bi_ba=bi_ba, m_node=m_node, m_edge=m_edge)
    for bi_ba, m_node, m_edge in itertools.product((False, True), repeat=3)
]


def run_ablation(config: ExperimentConfig, output_dir: str | Path | None = None, write: bool = True) -> list[AblationRow]:
    """8通りのスイッチ × シード数を実行し、指標の中央値を1行ずつ返す

    シードは ``config.seed`` から ``config.seeds`` 個の連番。
    """
    rows = []
    for switches in ABLATION_GRID:
        reports = []
        for seed in range(config.seed, config.seed + config.seeds):
            run_config = config.model_copy(update={"ablation": switches, "seed": seed, "name": f"{config.name}-{seed}"})
            reports.append(run_experiment(run_config, write=False))
        rows.append(
            AblationRow(
                bi_ba=switches.bi_ba,
                m_node=switches.m_node,
                m_edge=switches.m_edge,
                runs=len(reports),
                ate=float(np.median([r.metrics.ate for r in reports])),
                accuracy=float(np.median([r.metrics.accuracy for r in reports])),
                completion=float(np.median([r.metrics.completion for r in reports])),
                chamfer=float(np.median([r.metrics.chamfer for r in reports])),
            )
        )
        logger.info(f"ablation {switches.label()}: median chamfer {rows[-1].chamfer:.4f}")
    if write:
        out = resolve_output_dir(config, output_dir)
        write_ablation_csv(rows, out / "ablation.csv")
        logger.info(f"ablation table written to {out / 'ablation.csv'}")
    return rows


def write_scene_artifacts(config: ExperimentConfig, output_dir: str | Path | None = None) -> Path:
    """GT軌跡・フレームごとのデプス（.npy）・GT点群を書き出す"""
    out = resolve_output_dir(config, output_dir)
    scene = make_scene(
        config.scene, config.trajectory, config.num_frames, config.intrinsics, config.seed, textureless=config.textureless_region
    )
    truth = render_ground_truth(scene, config)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for f, depth in truth.depths.items():
            np.save(out / f"depth_{f:03d}.npy", depth.values)
    except OSError as e:
        raise IoError(f"cannot write depth maps to {out}: {e}") from e
    write_trajectory(truth.trajectory(), out / "trajectory_gt.txt")
    export_ply(gt_point_cloud(scene, config.eval.cloud_stride), out / "cloud_gt.ply")
    logger.info(f"synthetic scene '{config.scene}' written to {out}")
    return out
