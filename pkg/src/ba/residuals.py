"""フロー整合残差と幾何整合残差

エッジ (i, j) では、フレームiの各画素uをD_iで持ち上げてフレームjへ移し、投影する（u_j）。
フロー残差はu_jと観測対応 u + F(u) を比べる。幾何残差はu_jでD_jをサンプルして持ち上げ、
フレームiへ戻して再投影した位置がuからどれだけずれるかを測る。

グリッドはすべて (H, W) または (H, W, k)。ヤコビアンはworld-to-camera姿勢T_i, T_jの
左ツイストとD_i(u)について取る。D_jのサンプルは1回の線形化の中では定数として扱う。
"""

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from src.errors import NonPositiveDepth
from src.geometry.camera import Z_MIN, Intrinsics, point_pose_jacobian, projection_jacobian, project_masked, transform_project
from src.geometry.sampling import sample_depth
from src.geometry.se3 import Pose, adjoint, relative

Edge = tuple[int, int]


@dataclass(frozen=True)
class DepthMap:
    """キーフレーム1枚の画素ごとの正のデプス（m）"""

    values: np.ndarray
    frame_id: int

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("depth map must be a 2D grid")
        if not np.all(values > 0):
            raise NonPositiveDepth(f"depth map of frame {self.frame_id} has non-positive values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def median(self) -> float:
        return float(np.median(self.values))


@dataclass(frozen=True)
class FlowField:
    """有向エッジの画素ごとの変位（px）と信頼度"""

    flow: np.ndarray
    confidence: np.ndarray
    source_id: int
    target_id: int

    def __post_init__(self):
        flow = np.array(self.flow, dtype=float)
        confidence = np.broadcast_to(np.asarray(self.confidence, dtype=float), flow.shape[:2]).copy()
        if flow.ndim != 3 or flow.shape[2] != 2:
            raise ValueError("flow must have shape (H, W, 2)")
        if not np.all(np.isfinite(flow)):
            raise ValueError("flow must be finite")
        if np.any(confidence < 0.0) or np.any(confidence > 1.0):
            raise ValueError("confidence must lie in [0, 1]")
        flow.setflags(write=False)
        confidence.setflags(write=False)
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "confidence", confidence)

    @property
    def edge(self) -> Edge:
        return (self.source_id, self.target_id)

    def with_flow(self, flow: np.ndarray, confidence: np.ndarray | None = None) -> "FlowField":
        return FlowField(flow, self.confidence if confidence is None else confidence, self.source_id, self.target_id)


@dataclass(frozen=True)
class EdgeResiduals:
    source_id: int
    target_id: int
    r_flow: np.ndarray  # (H, W, 2)
    r_geo: np.ndarray  # (H, W), 0 where not geo_valid
    valid: np.ndarray  # flow residual defined
    geo_valid: np.ndarray  # geometry residual defined
    omega_set: np.ndarray  # geo_valid and r_geo < tau

    @property
    def flow_magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.r_flow, axis=-1)


@dataclass(frozen=True)
class FlowResidual:
    residual: np.ndarray
    valid: np.ndarray
    target_uv: np.ndarray
    j_depth: np.ndarray | None = None
    j_source: np.ndarray | None = None
    j_target: np.ndarray | None = None


@dataclass(frozen=True)
class GeometryResidual:
    residual: np.ndarray  # ||e||
    error: np.ndarray  # e = u_back - u, (H, W, 2)
    valid: np.ndarray
    omega_set: np.ndarray
    sampled_depth: np.ndarray
    j_depth: np.ndarray | None = None
    j_source: np.ndarray | None = None
    j_target: np.ndarray | None = None


@dataclass(frozen=True)
class CombinedCost:
    cost: np.ndarray
    flow_weight: np.ndarray
    geo_weight: np.ndarray


def _as_values(depth) -> np.ndarray:
    return depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=float)


def _forward(edge: Edge, poses: Mapping[int, Pose], depth_i: np.ndarray, k: Intrinsics, z_min: float, jacobians: bool):
    i, j = edge
    T_ji = relative(poses[i], poses[j])
    grid = k.pixel_grid()
    fwd = transform_project(grid, depth_i, T_ji, k, z_min=z_min, jacobians=jacobians)
    return grid, T_ji, fwd


def _flow_from_forward(grid, T_ji, fwd, flow: FlowField, k: Intrinsics, jacobians: bool) -> FlowResidual:
    valid = fwd.valid & k.in_bounds(fwd.uv)
    residual = np.where(valid[..., None], fwd.uv - (grid + flow.flow), 0.0)
    if not jacobians:
        return FlowResidual(residual=residual, valid=valid, target_uv=fwd.uv)
    mask = valid[..., None, None]
    j_target = np.where(mask, fwd.j_pose, 0.0)
    j_source = -j_target @ adjoint(T_ji)
    j_depth = np.where(valid[..., None], fwd.j_depth, 0.0)
    return FlowResidual(residual, valid, fwd.uv, j_depth=j_depth, j_source=j_source, j_target=j_target)


def flow_residual(
    edge: Edge,
    poses: Mapping[int, Pose],
    depths: Mapping[int, np.ndarray | DepthMap],
    flow: FlowField,
    k: Intrinsics,
    z_min: float = Z_MIN,
    jacobians: bool = False,
) -> FlowResidual:
    """r(u) = u_proj - (u + F(u))。チェイラリティ違反やu_projがフレームj外なら無効"""
    grid, T_ji, fwd = _forward(edge, poses, _as_values(depths[edge[0]]), k, z_min, jacobians)
    return _flow_from_forward(grid, T_ji, fwd, flow, k, jacobians)


def _geometry_from_forward(
    depth_j: np.ndarray,
    grid,
    T_ji: Pose,
    fwd,
    k: Intrinsics,
    tau: float,
    z_min: float,
    jacobians: bool,
    frozen_sample: np.ndarray | None = None,
) -> GeometryResidual:
    if frozen_sample is None:
        s, sample_ok = sample_depth(depth_j, fwd.uv)
    else:
        s = np.asarray(frozen_sample, dtype=float)
        sample_ok = k.in_bounds(fwd.uv) & (s > 0)
        s = np.where(sample_ok, s, 1.0)

    T_ij = T_ji.inverse()
    R_ij = T_ij.rotation
    uv_j = np.where(fwd.valid[..., None], fwd.uv, grid)
    bearing_j = np.ones(grid.shape[:-1] + (3,))
    bearing_j[..., 0] = (uv_j[..., 0] - k.cx) / k.fx
    bearing_j[..., 1] = (uv_j[..., 1] - k.cy) / k.fy
    w = T_ij.apply(bearing_j * s[..., None])
    uv_back, back_ok = project_masked(w, k, z_min)

    valid = fwd.valid & sample_ok & back_ok
    error = np.where(valid[..., None], uv_back - grid, 0.0)
    residual = np.linalg.norm(error, axis=-1)
    omega_set = valid & (residual < tau)
    if not jacobians:
        return GeometryResidual(residual, error, valid, omega_set, s)

    J_w = projection_jacobian(w, k)
    direct_source = J_w @ point_pose_jacobian(w)
    direct_target = -direct_source @ adjoint(T_ij)
    # d u_back / d u_j with s fixed
    lift = np.zeros(grid.shape[:-1] + (3, 2))
    lift[..., 0, 0] = s / k.fx
    lift[..., 1, 1] = s / k.fy
    A = J_w @ R_ij @ lift

    fwd_target = fwd.j_pose
    fwd_source = -fwd_target @ adjoint(T_ji)
    j_source = direct_source + A @ fwd_source
    j_target = direct_target + A @ fwd_target
    j_depth = np.einsum("...ab,...b->...a", A, fwd.j_depth)

    mask = valid[..., None, None]
    return GeometryResidual(
        residual,
        error,
        valid,
        omega_set,
        s,
        j_depth=np.where(valid[..., None], j_depth, 0.0),
        j_source=np.where(mask, j_source, 0.0),
        j_target=np.where(mask, j_target, 0.0),
    )


def geometry_residual(
    edge: Edge,
    poses: Mapping[int, Pose],
    depths_i: np.ndarray | DepthMap,
    depths_j: np.ndarray | DepthMap,
    k: Intrinsics,
    tau: float = 1.0,
    z_min: float = Z_MIN,
    jacobians: bool = False,
    frozen_sample: np.ndarray | None = None,
) -> GeometryResidual:
    """r_geo(u) = ||u_back - u|| と Omega = valid & (r_geo < tau)

    Args:
        edge: (i, j)
        poses: フレームID → world-to-camera姿勢
        depths_i: フレームiのデプス
        depths_j: フレームjのデプス（u_jで双線形サンプル）
        k: 内部パラメータ
        tau: 包含閾値（px）
        z_min: チェイラリティ閾値
        jacobians: ヤコビアンも返すか
        frozen_sample: D_jのサンプル値を外部から与える（有限差分検証用）

    Returns:
        GeometryResidual: サンプル範囲外・チェイラリティ違反はvalid=False
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    grid, T_ji, fwd = _forward(edge, poses, _as_values(depths_i), k, z_min, jacobians)
    return _geometry_from_forward(
        _as_values(depths_j), grid, T_ji, fwd, k, tau, z_min, jacobians, frozen_sample
    )


def huber(s: np.ndarray, delta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """非負の大きさsに対するHuberコストrho(s)とIRLS重みrho'(s)/s"""
    s = np.asarray(s, dtype=float)
    inside = s <= delta
    rho = np.where(inside, 0.5 * s * s, delta * (s - 0.5 * delta))
    weight = np.where(inside, 1.0, delta / np.where(inside, 1.0, s))
    return rho, weight


def combined_cost(
    r_flow: np.ndarray,
    r_geo: np.ndarray,
    omega: np.ndarray,
    omega_set: np.ndarray,
    valid: np.ndarray | None = None,
    delta: float = 1.0,
) -> CombinedCost:
    """Omega上では cost = w*rho(|r_flow|) + (1-w)*rho(r_geo)、Omega外の有効画素では w*rho(|r_flow|)

    ``r_flow`` は (H, W, 2) のベクトル残差でもその大きさでもよい。
    """
    r_flow = np.asarray(r_flow, dtype=float)
    flow_mag = np.linalg.norm(r_flow, axis=-1) if r_flow.ndim == np.ndim(r_geo) + 1 else np.abs(r_flow)
    r_geo = np.asarray(r_geo, dtype=float)
    omega = np.broadcast_to(np.asarray(omega, dtype=float), flow_mag.shape)
    omega_set = np.asarray(omega_set, dtype=bool)
    valid = np.ones(flow_mag.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    omega_set = omega_set & valid

    rho_f, w_f = huber(flow_mag, delta)
    rho_g, w_g = huber(np.where(omega_set, r_geo, 0.0), delta)
    cost = np.where(valid, omega * rho_f, 0.0) + np.where(omega_set, (1.0 - omega) * rho_g, 0.0)
    return CombinedCost(
        cost=cost,
        flow_weight=np.where(valid, omega * w_f, 0.0),
        geo_weight=np.where(omega_set, (1.0 - omega) * w_g, 0.0),
    )


@dataclass(frozen=True)
class EdgeEvaluation:
    residuals: EdgeResiduals
    cost: CombinedCost
    flow: FlowResidual
    geometry: GeometryResidual | None


def evaluate_edge(
    edge: Edge,
    poses: Mapping[int, Pose],
    depths: Mapping[int, np.ndarray | DepthMap],
    flow: FlowField,
    k: Intrinsics,
    tau: float = 1.0,
    delta: float = 1.0,
    use_geometry: bool = True,
    z_min: float = Z_MIN,
    jacobians: bool = False,
) -> EdgeEvaluation:
    """1回の順投影から1エッジの両残差を評価する

    ``use_geometry=False`` でも幾何残差はEdgeResidualsに入る（ノードマスクが使う）が、コストには寄与しない。
    """
    i, j = edge
    grid, T_ji, fwd = _forward(edge, poses, _as_values(depths[i]), k, z_min, jacobians)
    flow_res = _flow_from_forward(grid, T_ji, fwd, flow, k, jacobians)
    geo = _geometry_from_forward(
        _as_values(depths[j]), grid, T_ji, fwd, k, tau, z_min, jacobians and use_geometry
    )
    gated = geo.omega_set & flow_res.valid
    cost = combined_cost(
        flow_res.residual,
        geo.residual,
        flow.confidence,
        gated if use_geometry else np.zeros_like(gated),
        flow_res.valid,
        delta,
    )
    residuals = EdgeResiduals(
        source_id=i,
        target_id=j,
        r_flow=flow_res.residual,
        r_geo=geo.residual,
        valid=flow_res.valid,
        geo_valid=geo.valid & flow_res.valid,
        omega_set=gated,
    )
    return EdgeEvaluation(residuals=residuals, cost=cost, flow=flow_res, geometry=geo if use_geometry else None)
