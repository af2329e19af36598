"""SE(3) 上の剛体変換

ツイストは (omega, v) 順の6ベクトル（回転[rad]、並進[m]）。姿勢更新は左乗算
``T <- exp(xi) * T``。

回転は3x3行列で保持し、クォータニオンはファイル入出力でのみ使う
（x, y, z, w 順、Hamilton規約）。
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

# Below this angle the trigonometric coefficients switch to Taylor series.
SERIES_ANGLE = 1e-3
# Above pi - NEAR_PI_ANGLE the rotation axis is read from the symmetric part.
NEAR_PI_ANGLE = 1e-2

Twist = np.ndarray


def hat(w: np.ndarray) -> np.ndarray:
    """3ベクトルの歪対称行列（先頭軸でバッチ化）"""
    w = np.asarray(w, dtype=float)
    S = np.zeros(w.shape[:-1] + (3, 3))
    S[..., 0, 1] = -w[..., 2]
    S[..., 0, 2] = w[..., 1]
    S[..., 1, 0] = w[..., 2]
    S[..., 1, 2] = -w[..., 0]
    S[..., 2, 0] = -w[..., 1]
    S[..., 2, 1] = w[..., 0]
    return S


def vee(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def _series_coefficients(theta: float) -> tuple[float, float, float]:
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3"""
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        return a, b, c
    s, co = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - co) / theta**2, (theta - s) / theta**3


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    a, b, _ = _series_coefficients(theta)
    W = hat(w)
    return np.eye(3) + a * W + b * (W @ W)


def left_jacobian(w: np.ndarray) -> np.ndarray:
    """SO(3) の左ヤコビアンV（exp((w, v)) の並進が V @ v になる）"""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    _, b, c = _series_coefficients(theta)
    W = hat(w)
    return np.eye(3) + b * W + c * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    axis_sin = vee(R - R.T) / 2.0  # sin(theta) * axis
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arctan2(np.linalg.norm(axis_sin), cos_theta))

    if theta < SERIES_ANGLE:
        t2 = theta * theta
        return axis_sin * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)

    if theta > np.pi - NEAR_PI_ANGLE:
        # a a^T = (sym(R) - cos I) / (1 - cos)
        M = ((R + R.T) / 2.0 - cos_theta * np.eye(3)) / (1.0 - cos_theta)
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(M[k, k])
        axis /= np.linalg.norm(axis)
        if np.dot(axis, axis_sin) < 0.0:
            axis = -axis
        return theta * axis

    return axis_sin * (theta / np.sin(theta))


@dataclass(frozen=True)
class Pose:
    """剛体変換 x' = R x + t

    キーフレーム姿勢はworld-to-cameraで保持するので、エッジ (i, j) の相対変換は ``T_j * T_i^-1``。
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_quaternion(cls, quaternion_xyzw: np.ndarray, translation: np.ndarray) -> "Pose":
        return cls(Rotation.from_quat(quaternion_xyzw).as_matrix(), translation)

    def quaternion(self) -> np.ndarray:
        """単位クォータニオン (x, y, z, w)（w >= 0）"""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """形状 (..., 3) の点を変換する"""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self * other（``other`` を先に適用）"""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def center(self) -> np.ndarray:
        """world-to-camera姿勢ならカメラ中心（ワールド座標）"""
        return -self.rotation.T @ self.translation

    def orthonormality_error(self) -> float:
        R = self.rotation
        return float(
            max(
                np.abs(R.T @ R - np.eye(3)).max(),
                abs(np.linalg.det(R) - 1.0),
            )
        )


def exp(twist: Twist) -> Pose:
    xi = np.asarray(twist, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    return Pose(so3_exp(w), left_jacobian(w) @ v)


def log(pose: Pose) -> Twist:
    w = so3_log(pose.rotation)
    v = np.linalg.solve(left_jacobian(w), pose.translation)
    return np.concatenate([w, v])


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(a: Pose) -> Pose:
    return a.inverse()


def adjoint(pose: Pose) -> np.ndarray:
    """(omega, v) ツイストの6x6随伴行列: T exp(xi) T^-1 = exp(Ad xi)"""
    R, t = pose.rotation, pose.translation
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[3:, 3:] = R
    Ad[3:, :3] = hat(t) @ R
    return Ad


def relative(pose_i: Pose, pose_j: Pose) -> Pose:
    """world-to-camera姿勢での T_ji = T_j * T_i^-1"""
    return pose_j.compose(pose_i.inverse())


def look_at(center: np.ndarray, target: np.ndarray, down: np.ndarray = (0.0, 1.0, 0.0)) -> Pose:
    """``center`` から ``target`` を向くカメラのworld-to-camera姿勢

    カメラ軸は画像の慣例どおり（x右、y下、z前方）。
    """
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_wc = np.stack([x, y, z], axis=1)
    R = R_wc.T
    return Pose(R, -R @ center)


def random_pose(rng: np.random.Generator, max_angle: float = 3.0, max_translation: float = 1.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(so3_exp(axis * angle), rng.uniform(-max_translation, max_translation, size=3))


def perturb(pose: Pose, rng: np.random.Generator, angle_rad: float, translation_m: float) -> Pose:
    """ランダムな方向に、固定の回転角と並進長で姿勢を左から摂動する"""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    delta = Pose(so3_exp(axis * angle_rad), direction * translation_m)
    return delta.compose(pose)
