"""軌跡と再構成の評価指標"""

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from src.errors import EmptyCloud, TooFewPairs
from src.geometry.se3 import Pose


@dataclass(frozen=True)
class Trajectory:
    """タイムスタンプ付き姿勢列（camera-to-world、時刻は狭義単調増加）"""

    timestamps: np.ndarray
    poses: tuple[Pose, ...]

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(ts) != len(self.poses):
            raise ValueError("timestamps and poses must have equal length")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * R x + t"""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CloudMetrics:
    accuracy: float
    completion: float
    chamfer: float


def associate(est_times: np.ndarray, gt_times: np.ndarray, max_gap: float = 0.02) -> list[tuple[int, int]]:
    """``max_gap`` 秒以内で最も近い時刻同士を貪欲に1対1で対応付ける"""
    est_times = np.asarray(est_times, dtype=float)
    gt_times = np.asarray(gt_times, dtype=float)
    lo = np.searchsorted(gt_times, est_times - max_gap, side="left")
    hi = np.searchsorted(gt_times, est_times + max_gap, side="right")
    candidates = []
    for a, (start, stop) in enumerate(zip(lo, hi)):
        for b in range(start, stop):
            diff = abs(est_times[a] - gt_times[b])
            if diff < max_gap:
                candidates.append((diff, a, b))
    candidates.sort()
    used_est, used_gt, matches = set(), set(), []
    for _, a, b in candidates:
        if a not in used_est and b not in used_gt:
            used_est.add(a)
            used_gt.add(b)
            matches.append((a, b))
    return sorted(matches)


def umeyama(source: np.ndarray, target: np.ndarray, with_scale: bool = True) -> SimilarityTransform:
    """``source`` を ``target`` に重ねる最小二乗の（相似）変換"""
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs * xs, axis=1))
    scale = float(np.trace(np.diag(D) @ S) / var_s) if with_scale and var_s > 0 else 1.0
    return SimilarityTransform(R, mu_d - scale * R @ mu_s, scale)


def _matched_positions(est: Trajectory, gt: Trajectory, max_gap: float) -> tuple[np.ndarray, np.ndarray]:
    pairs = associate(est.timestamps, gt.timestamps, max_gap)
    if len(pairs) < 3:
        raise TooFewPairs(f"only {len(pairs)} associated pose pair(s), need at least 3")
    ia, ib = zip(*pairs)
    return est.positions[list(ia)], gt.positions[list(ib)]


def align(est: Trajectory, gt: Trajectory, with_scale: bool = True, max_gap: float = 0.02) -> SimilarityTransform:
    """推定位置をGT位置に重ねる変換を求める

    Raises:
        TooFewPairs: 対応付けられたペアが3未満
    """
    est_pos, gt_pos = _matched_positions(est, gt, max_gap)
    return umeyama(est_pos, gt_pos, with_scale)


def translation_errors(est: Trajectory, gt: Trajectory, with_scale: bool = True, max_gap: float = 0.02) -> np.ndarray:
    est_pos, gt_pos = _matched_positions(est, gt, max_gap)
    transform = umeyama(est_pos, gt_pos, with_scale)
    return np.linalg.norm(transform.apply(est_pos) - gt_pos, axis=1)


def ate_rmse(est: Trajectory, gt: Trajectory, with_scale: bool = True, max_gap: float = 0.02) -> float:
    errors = translation_errors(est, gt, with_scale, max_gap)
    return float(np.sqrt(np.mean(errors**2)))


def auc_thresholds(max_threshold: float = 0.5, count: int = 128) -> np.ndarray:
    """(0, max_threshold] を ``count`` 等分した閾値"""
    return max_threshold * np.arange(1, count + 1) / count


def auc(errors: Sequence[float], thresholds: np.ndarray | None = None) -> float:
    """成功率曲線の下側面積（0〜100）"""
    errors = np.asarray(errors, dtype=float).reshape(-1)
    if errors.size == 0:
        raise ValueError("auc needs at least one error")
    thresholds = auc_thresholds() if thresholds is None else np.asarray(thresholds, dtype=float)
    success = (errors[None, :] <= thresholds[:, None]).mean(axis=1)
    return float(100.0 * success.mean())


def nearest_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    distances, _ = cKDTree(reference).query(query)
    return distances


def nearest_distances_bruteforce(query: np.ndarray, reference: np.ndarray, chunk: int = 512) -> np.ndarray:
    query = np.asarray(query, dtype=float)
    reference = np.asarray(reference, dtype=float)
    out = np.empty(len(query))
    for start in range(0, len(query), chunk):
        block = query[start : start + chunk]
        d2 = np.sum((block[:, None, :] - reference[None, :, :]) ** 2, axis=-1)
        out[start : start + chunk] = np.sqrt(d2.min(axis=1))
    return out


def cloud_metrics(est: PointCloud | np.ndarray, gt: PointCloud | np.ndarray, clip: float = 0.5) -> CloudMetrics:
    """クリップ付きのaccuracy（推定→GT）、completion（GT→推定）とその平均

    Raises:
        EmptyCloud: どちらかの点群が空
    """
    est_pts = est.points if isinstance(est, PointCloud) else np.asarray(est, dtype=float).reshape(-1, 3)
    gt_pts = gt.points if isinstance(gt, PointCloud) else np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(est_pts) == 0 or len(gt_pts) == 0:
        raise EmptyCloud("cloud metrics need two non-empty clouds")
    accuracy = float(np.mean(np.minimum(nearest_distances(est_pts, gt_pts), clip)))
    completion = float(np.mean(np.minimum(nearest_distances(gt_pts, est_pts), clip)))
    return CloudMetrics(accuracy, completion, 0.5 * (accuracy + completion))


def depth_error(
    est: Mapping[int, np.ndarray],
    gt: Mapping[int, np.ndarray],
    masks: Mapping[int, np.ndarray] | None = None,
    align_scale: bool = True,
) -> float:
    """全体の中央値スケールを合わせた後の、マスク内画素の平均相対デプス誤差"""
    est_vals, gt_vals = [], []
    for frame_id, gt_depth in gt.items():
        sel = np.ones(gt_depth.shape, dtype=bool) if masks is None else np.asarray(masks[frame_id], dtype=bool)
        est_vals.append(np.asarray(est[frame_id])[sel])
        gt_vals.append(np.asarray(gt_depth)[sel])
    e = np.concatenate(est_vals)
    g = np.concatenate(gt_vals)
    if e.size == 0:
        return float("nan")
    scale = float(np.median(g / e)) if align_scale else 1.0
    return float(np.mean(np.abs(scale * e - g) / g))
