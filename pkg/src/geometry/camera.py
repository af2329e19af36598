"""解析ヤコビアン付きピンホールカメラモデル

すべての関数は先頭軸についてベクトル化されている（画素 (..., 2)、点 (..., 3)、デプス (...)）。
例外を送出する版はスカラーの契約どおり。``*_masked`` / ``strict=False`` の版は
代わりに有効マスクを返すので、呼び出し側で画素を落とせる。
"""

from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import DepthBehindCamera, NonPositiveDepth
from src.geometry.se3 import Pose, hat

# Cheirality cutoff in meters.
Z_MIN = 1e-3

# Pixel = ndarray with trailing axis (u, v)
Pixel = np.ndarray


class Intrinsics(BaseModel):
    """ピンホールカメラの内部パラメータ（作業解像度）"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    fx: float = Field(description="Focal length along u (pixels)")
    fy: float = Field(description="Focal length along v (pixels)")
    cx: float = Field(description="Principal point u (pixels)")
    cy: float = Field(description="Principal point v (pixels)")
    width: int = Field(description="Working image width (pixels)")
    height: int = Field(description="Working image height (pixels)")

    @model_validator(mode="after")
    def check_ranges(self) -> "Intrinsics":
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        return self

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        """``factor`` 倍にリサイズした画像の内部パラメータ（画素中心基準）"""
        return Intrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )

    def pixel_grid(self) -> np.ndarray:
        """整数画素座標 (u, v) の (H, W, 2) グリッド"""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        return np.stack([u, v], axis=-1)

    def in_bounds(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        u, v = uv[..., 0], uv[..., 1]
        return (
            np.isfinite(u)
            & np.isfinite(v)
            & (u >= 0.0)
            & (u <= self.width - 1)
            & (v >= 0.0)
            & (v <= self.height - 1)
        )


def default_intrinsics() -> Intrinsics:
    """64x48の作業解像度（fx = 400 の512x384入力の1/8）"""
    return Intrinsics(fx=400.0, fy=400.0, cx=255.5, cy=191.5, width=512, height=384).scaled(0.125)


def _bearing(uv: np.ndarray, k: Intrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    b = np.ones(uv.shape[:-1] + (3,))
    b[..., 0] = (uv[..., 0] - k.cx) / k.fx
    b[..., 1] = (uv[..., 1] - k.cy) / k.fy
    return b


def project_masked(x: np.ndarray, k: Intrinsics, z_min: float = Z_MIN) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    valid = x[..., 2] > z_min
    z = np.where(valid, x[..., 2], 1.0)
    uv = np.stack([k.fx * x[..., 0] / z + k.cx, k.fy * x[..., 1] / z + k.cy], axis=-1)
    return uv, valid


def project(x: np.ndarray, k: Intrinsics, z_min: float = Z_MIN) -> Pixel:
    uv, valid = project_masked(x, k, z_min)
    if not np.all(valid):
        raise DepthBehindCamera(f"{int(np.size(valid) - np.count_nonzero(valid))} point(s) with z <= {z_min}")
    return uv


def backproject(uv: Pixel, d: np.ndarray, k: Intrinsics) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if np.any(~(d > 0)):
        raise NonPositiveDepth("backproject requires depth > 0")
    return _bearing(uv, k) * d[..., None]


def projection_jacobian(q: np.ndarray, k: Intrinsics) -> np.ndarray:
    """d pi / d q（形状 (..., 2, 3)）。z <= z_min の点は呼び出し側でマスクすること"""
    q = np.asarray(q, dtype=float)
    z = np.where(q[..., 2] > 0, q[..., 2], 1.0)
    J = np.zeros(q.shape[:-1] + (2, 3))
    J[..., 0, 0] = k.fx / z
    J[..., 0, 2] = -k.fx * q[..., 0] / z**2
    J[..., 1, 1] = k.fy / z
    J[..., 1, 2] = -k.fy * q[..., 1] / z**2
    return J


def point_pose_jacobian(q: np.ndarray) -> np.ndarray:
    """(omega, v) ツイストについての xi = 0 での d (exp(xi) q) / d xi = [-[q]x, I]"""
    q = np.asarray(q, dtype=float)
    J = np.zeros(q.shape[:-1] + (3, 6))
    J[..., :, :3] = -hat(q)
    J[..., :, 3:] = np.eye(3)
    return J


@dataclass(frozen=True)
class TransformProjection:
    uv: np.ndarray  # (..., 2)
    points: np.ndarray  # (..., 3) in the target camera
    valid: np.ndarray  # (...,) cheirality
    j_pose: np.ndarray | None = None  # (..., 2, 6)
    j_depth: np.ndarray | None = None  # (..., 2)


def transform_project(
    uv: Pixel,
    d: np.ndarray,
    T: Pose,
    k: Intrinsics,
    z_min: float = Z_MIN,
    strict: bool = False,
    jacobians: bool = True,
) -> TransformProjection:
    """u_proj = pi(T * pi^-1(u, d)) と、Tの左ツイストおよびdに関するヤコビアン

    Args:
        uv: ソース画素 (..., 2)
        d: ソース画素のデプス (...)
        T: ソース→ターゲットの相対姿勢
        k: 内部パラメータ
        z_min: チェイラリティ閾値
        strict: Trueなら無効点でDepthBehindCameraを送出
        jacobians: ヤコビアンを計算するか

    Returns:
        TransformProjection: 無効画素のヤコビアンは0
    """
    b = _bearing(uv, k)
    p = backproject(uv, d, k)
    q = T.apply(p)
    uv_proj, valid = project_masked(q, k, z_min)
    if strict and not np.all(valid):
        raise DepthBehindCamera("transformed point behind target camera")
    if not jacobians:
        return TransformProjection(uv=uv_proj, points=q, valid=valid)

    J_pi = projection_jacobian(q, k)
    j_pose = J_pi @ point_pose_jacobian(q)
    j_depth = np.einsum("...ij,...j->...i", J_pi, b @ T.rotation.T)
    j_pose = np.where(valid[..., None, None], j_pose, 0.0)
    j_depth = np.where(valid[..., None], j_depth, 0.0)
    return TransformProjection(uv=uv_proj, points=q, valid=valid, j_pose=j_pose, j_depth=j_depth)


def induced_flow(depth: np.ndarray, T: Pose, k: Intrinsics, z_min: float = Z_MIN) -> tuple[np.ndarray, np.ndarray]:
    """全画素のフロー pi(T pi^-1(u, D(u))) - u とチェイラリティマスク"""
    grid = k.pixel_grid()
    result = transform_project(grid, depth, T, k, z_min=z_min, jacobians=False)
    flow = np.where(result.valid[..., None], result.uv - grid, 0.0)
    return flow, result.valid
