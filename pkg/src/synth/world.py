"""解析的なGTワールド: テクスチャ付き曲面、軌跡、厳密なデプスとフロー

ワールド座標は x右、y下、z前方（静止カメラと同じ軸）。デプスはカメラ座標のz。
world-to-camera姿勢 (R, t) のカメラで画素uを通る光線は c + s * R^T b(u)、
b(u) = ((u - cx)/fx, (v - cy)/fy, 1) なので、光線パラメータsがそのままzデプスになる。
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from src.ba.residuals import DepthMap, FlowField
from src.geometry.camera import Intrinsics, default_intrinsics, transform_project
from src.geometry.se3 import Pose, look_at, relative
from src.utils.logger import get_logger

logger = get_logger(__name__)

TEXTURE_CHANNELS = 8
MIN_DEPTH = 0.1
MAX_DEPTH = 100.0
OCCLUSION_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Texture:
    """曲面座標（m）上の多周波正弦波テクスチャ

    ``flat_rect`` = (s0, t0, s1, t1) は全チャネルが0のテクスチャなし矩形。
    その外側では振幅が ``edge_width`` [m] かけてsmoothstepで1まで上がるので、境界に段差はない。
    """

    frequencies: np.ndarray  # (C, 2) cycles per meter
    phases: np.ndarray  # (C,)
    flat_rect: tuple[float, float, float, float] | None = None
    edge_width: float = 0.25

    def is_flat(self, st: np.ndarray) -> np.ndarray:
        st = np.asarray(st, dtype=float)
        if self.flat_rect is None:
            return np.zeros(st.shape[:-1], dtype=bool)
        s0, t0, s1, t1 = self.flat_rect
        s, t = st[..., 0], st[..., 1]
        return (s >= s0) & (s <= s1) & (t >= t0) & (t <= t1)

    def amplitude(self, st: np.ndarray) -> np.ndarray:
        st = np.asarray(st, dtype=float)
        if self.flat_rect is None:
            return np.ones(st.shape[:-1])
        s0, t0, s1, t1 = self.flat_rect
        ds = np.maximum(np.maximum(s0 - st[..., 0], st[..., 0] - s1), 0.0)
        dt = np.maximum(np.maximum(t0 - st[..., 1], st[..., 1] - t1), 0.0)
        if self.edge_width <= 0:
            return np.where(self.is_flat(st), 0.0, 1.0)
        w = np.clip(np.hypot(ds, dt) / self.edge_width, 0.0, 1.0)
        return w * w * (3.0 - 2.0 * w)

    def evaluate(self, st: np.ndarray) -> np.ndarray:
        st = np.asarray(st, dtype=float)
        values = np.sin(2.0 * np.pi * (st @ self.frequencies.T) + self.phases)
        return values * self.amplitude(st)[..., None]


def make_texture(
    rng: np.random.Generator,
    flat_rect: tuple[float, float, float, float] | None = None,
    channels: int = TEXTURE_CHANNELS,
    min_frequency: float = 0.8,
    max_frequency: float = 1.8,
) -> Texture:
    angles = np.linspace(0.0, np.pi, channels, endpoint=False) + rng.uniform(0.0, np.pi / channels)
    magnitudes = rng.uniform(min_frequency, max_frequency, size=channels)
    freqs = np.stack([np.cos(angles), np.sin(angles)], axis=-1) * magnitudes[:, None]
    return Texture(freqs, rng.uniform(0.0, 2.0 * np.pi, size=channels), flat_rect)


class Surface(Protocol):
    texture: Texture

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray: ...

    def surface_coords(self, points: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray
    texture: Texture
    axis_u: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        a = np.asarray(self.axis_u, dtype=float)
        a = a - np.dot(a, n) * n
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "axis_u", a / np.linalg.norm(a))

    def intersect(self, origins, directions):
        denom = directions @ self.normal
        ok = np.abs(denom) > 1e-12
        s = ((self.point - origins) @ self.normal) / np.where(ok, denom, 1.0)
        return np.where(ok & (s > 0), s, np.inf)

    def surface_coords(self, points):
        rel = points - self.point
        axis_v = np.cross(self.normal, self.axis_u)
        return np.stack([rel @ self.axis_u, rel @ axis_v], axis=-1)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))

    def intersect(self, origins, directions):
        oc = origins - self.center
        a = np.sum(directions * directions, axis=-1)
        b = 2.0 * np.sum(directions * oc, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - 4.0 * a * c
        ok = disc >= 0
        root = np.sqrt(np.where(ok, disc, 0.0))
        near = (-b - root) / (2.0 * a)
        far = (-b + root) / (2.0 * a)
        s = np.where(near > 0, near, far)
        return np.where(ok & (s > 0), s, np.inf)

    def surface_coords(self, points):
        rel = (points - self.center) / self.radius
        longitude = np.arctan2(rel[..., 0], -rel[..., 2])
        latitude = np.arcsin(np.clip(rel[..., 1], -1.0, 1.0))
        return np.stack([self.radius * longitude, self.radius * latitude], axis=-1)


@dataclass(frozen=True)
class HeightField:
    """z = z0 + amplitude * sin(kx x) * sin(ky y)"""

    z0: float
    amplitude: float
    kx: float
    ky: float
    texture: Texture
    iterations: int = 60

    def height(self, x, y):
        return self.z0 + self.amplitude * np.sin(self.kx * x) * np.sin(self.ky * y)

    def intersect(self, origins, directions):
        dz = directions[..., 2]
        ok = dz > 1e-9
        s = np.where(ok, (self.z0 - origins[..., 2]) / np.where(ok, dz, 1.0), 0.0)
        for _ in range(self.iterations):
            p = origins + s[..., None] * directions
            x, y = p[..., 0], p[..., 1]
            g = p[..., 2] - self.height(x, y)
            dg = dz - self.amplitude * (
                self.kx * directions[..., 0] * np.cos(self.kx * x) * np.sin(self.ky * y)
                + self.ky * directions[..., 1] * np.sin(self.kx * x) * np.cos(self.ky * y)
            )
            ok &= np.abs(dg) > 1e-12
            s = s - np.where(ok, g / np.where(ok, dg, 1.0), 0.0)
        p = origins + s[..., None] * directions
        converged = np.abs(p[..., 2] - self.height(p[..., 0], p[..., 1])) < 1e-10
        return np.where(ok & converged & (s > 0), s, np.inf)

    def surface_coords(self, points):
        return points[..., :2]


@dataclass(frozen=True)
class SynthScene:
    name: str
    surfaces: tuple
    poses: tuple[Pose, ...]
    timestamps: np.ndarray
    intrinsics: Intrinsics
    seed: int = 0

    @property
    def num_frames(self) -> int:
        return len(self.poses)


@dataclass(frozen=True)
class RayHits:
    depth: np.ndarray
    valid: np.ndarray
    surface: np.ndarray  # index into scene.surfaces, -1 on miss
    points: np.ndarray  # world coordinates


@dataclass(frozen=True)
class Features:
    values: np.ndarray  # (H, W, C)
    textureless: np.ndarray  # (H, W)


@dataclass(frozen=True)
class GroundTruthFlow:
    flow: FlowField
    valid: np.ndarray  # source hit, cheirality, target inside frame j
    occluded: np.ndarray

    @property
    def visible(self) -> np.ndarray:
        return self.valid & ~self.occluded


def cast_rays(scene: SynthScene, pose: Pose, k: Intrinsics | None = None, uv: np.ndarray | None = None) -> RayHits:
    """全画素（または指定画素）について最も近い光線と曲面の交点"""
    k = k or scene.intrinsics
    uv = k.pixel_grid() if uv is None else np.asarray(uv, dtype=float)
    shape = uv.shape[:-1]
    flat = uv.reshape(-1, 2)
    bearing = np.stack([(flat[:, 0] - k.cx) / k.fx, (flat[:, 1] - k.cy) / k.fy, np.ones(len(flat))], axis=-1)
    directions = bearing @ pose.rotation
    origins = np.broadcast_to(pose.center(), directions.shape)

    candidates = np.stack([surface.intersect(origins, directions) for surface in scene.surfaces])
    nearest = np.argmin(candidates, axis=0)
    depth = candidates[nearest, np.arange(len(flat))]
    valid = np.isfinite(depth) & (depth >= MIN_DEPTH) & (depth <= MAX_DEPTH)
    points = origins + np.where(valid, depth, 0.0)[:, None] * directions
    return RayHits(
        depth=np.where(valid, depth, 0.0).reshape(shape),
        valid=valid.reshape(shape),
        surface=np.where(valid, nearest, -1).reshape(shape),
        points=points.reshape(shape + (3,)),
    )


def render_depth(scene: SynthScene, pose: Pose, k: Intrinsics | None = None, frame_id: int = 0) -> tuple[DepthMap, np.ndarray]:
    """最も近い曲面のzデプス。交点のない画素には有効デプスの最大値を入れる"""
    hits = cast_rays(scene, pose, k)
    fill = float(hits.depth[hits.valid].max()) if hits.valid.any() else MAX_DEPTH
    return DepthMap(np.where(hits.valid, hits.depth, fill), frame_id), hits.valid


def render_features(
    scene: SynthScene,
    pose: Pose,
    frame_id: int,
    noise: float = 0.0,
    k: Intrinsics | None = None,
) -> Features:
    """見えている曲面のテクスチャ値にフレームごとのガウスノイズを加える"""
    hits = cast_rays(scene, pose, k)
    H, W = hits.depth.shape
    values = np.zeros((H, W, TEXTURE_CHANNELS))
    flat = np.zeros((H, W), dtype=bool)
    for index, surface in enumerate(scene.surfaces):
        sel = hits.surface == index
        if not sel.any():
            continue
        st = surface.surface_coords(hits.points[sel])
        values[sel] = surface.texture.evaluate(st)
        flat[sel] = surface.texture.is_flat(st)
    if noise > 0:
        rng = np.random.default_rng([scene.seed, frame_id, 7919])
        values = values + rng.normal(0.0, noise, size=values.shape)
    return Features(values, flat)


def gt_flow(
    scene: SynthScene,
    pose_i: Pose,
    pose_j: Pose,
    k: Intrinsics | None = None,
    source_id: int = 0,
    target_id: int = 1,
) -> GroundTruthFlow:
    """フレームiからjへの厳密なフロー（解析的なZバッファで遮蔽判定）"""
    k = k or scene.intrinsics
    depth, hit = render_depth(scene, pose_i, k, source_id)
    grid = k.pixel_grid()
    fwd = transform_project(grid, depth.values, relative(pose_i, pose_j), k, jacobians=False)
    flow = np.where(fwd.valid[..., None], fwd.uv - grid, 0.0)
    valid = hit & fwd.valid & k.in_bounds(fwd.uv)

    target_hits = cast_rays(scene, pose_j, k, uv=np.where(valid[..., None], fwd.uv, grid))
    occluded = valid & target_hits.valid & (target_hits.depth < fwd.points[..., 2] - OCCLUSION_TOLERANCE)
    confidence = (valid & ~occluded).astype(float)
    return GroundTruthFlow(FlowField(flow, confidence, source_id, target_id), valid, occluded)


def gt_point_cloud(scene: SynthScene, stride: int = 1) -> np.ndarray:
    """全フレームの有効画素のワールド点（``stride`` で間引く）"""
    clouds = []
    for pose in scene.poses:
        hits = cast_rays(scene, pose)
        pts = hits.points[::stride, ::stride][hits.valid[::stride, ::stride]]
        clouds.append(pts)
    return np.concatenate(clouds, axis=0)


def coverage(scene: SynthScene) -> np.ndarray:
    """フレームごとに、単一の曲面が覆う画素割合の最大値"""
    fractions = []
    for pose in scene.poses:
        hits = cast_rays(scene, pose)
        counts = [np.count_nonzero(hits.surface == s) for s in range(len(scene.surfaces))]
        fractions.append(max(counts) / hits.surface.size)
    return np.array(fractions)


# ---------------------------------------------------------------------------
# presets


def plane_scene(rng: np.random.Generator) -> tuple:
    texture = make_texture(rng, flat_rect=(0.6, -0.9, 1.6, 0.1))
    return (Plane(point=[0.0, 0.0, 4.5], normal=[-0.12, 0.08, -1.0], texture=texture),)


def plane_sphere_scene(rng: np.random.Generator) -> tuple:
    background = make_texture(rng, flat_rect=(-1.9, 0.4, -0.9, 1.4))
    ball = make_texture(rng, min_frequency=1.2, max_frequency=2.4)
    return (
        Plane(point=[0.0, 0.0, 5.0], normal=[0.0, 0.0, -1.0], texture=background),
        Sphere(center=[0.15, 0.1, 3.3], radius=0.7, texture=ball),
    )


def height_field_scene(rng: np.random.Generator) -> tuple:
    texture = make_texture(rng, flat_rect=(-1.6, -1.2, -0.6, -0.2))
    return (HeightField(z0=4.5, amplitude=0.15, kx=2.0 * np.pi / 1.6, ky=2.0 * np.pi / 1.9, texture=texture),)


SCENE_PRESETS: dict[str, Callable[[np.random.Generator], tuple]] = {
    "plane": plane_scene,
    "plane_sphere": plane_sphere_scene,
    "height_field": height_field_scene,
}


def lateral_arc(num_frames: int) -> list[Pose]:
    s = np.linspace(-1.0, 1.0, num_frames)
    poses = []
    for x in s:
        center = np.array([0.6 * x, -0.04 * (1.0 - x * x), 0.1 * (1.0 - x * x)])
        poses.append(look_at(center, [0.0, 0.0, 12.0]))
    return poses


def forward_corridor(num_frames: int) -> list[Pose]:
    s = np.linspace(0.0, 1.0, num_frames)
    poses = []
    for a in s:
        center = np.array([0.08 * np.sin(np.pi * a), 0.03 * a, 0.8 * a])
        poses.append(look_at(center, [0.05, 0.0, 20.0]))
    return poses


TRAJECTORY_PRESETS: dict[str, Callable[[int], list[Pose]]] = {
    "lateral_arc": lateral_arc,
    "forward_corridor": forward_corridor,
}


def make_scene(
    preset: str = "plane_sphere",
    trajectory: str = "lateral_arc",
    num_frames: int = 6,
    intrinsics: Intrinsics | None = None,
    seed: int = 0,
    frame_interval: float = 0.1,
    textureless: bool = True,
) -> SynthScene:
    """名前付きプリセットからシーンを構築

    Args:
        preset: シーンプリセット名
        trajectory: 軌跡プリセット名
        num_frames: フレーム数
        intrinsics: 内部パラメータ（未指定なら64x48）
        seed: テクスチャ生成のシード
        frame_interval: フレーム間隔（秒）
        textureless: Falseならテクスチャなし矩形を外す

    Returns:
        SynthScene: 構築済みシーン
    """
    if preset not in SCENE_PRESETS:
        raise KeyError(f"unknown scene preset '{preset}'")
    if trajectory not in TRAJECTORY_PRESETS:
        raise KeyError(f"unknown trajectory preset '{trajectory}'")
    rng = np.random.default_rng([seed, 104729])
    surfaces = SCENE_PRESETS[preset](rng)
    if not textureless:
        surfaces = tuple(replace(s, texture=replace(s.texture, flat_rect=None)) for s in surfaces)
    poses = tuple(TRAJECTORY_PRESETS[trajectory](num_frames))
    scene = SynthScene(
        name=preset,
        surfaces=surfaces,
        poses=poses,
        timestamps=frame_interval * np.arange(num_frames),
        intrinsics=intrinsics or default_intrinsics(),
        seed=seed,
    )
    logger.debug(f"scene '{preset}' / '{trajectory}': {num_frames} frames, {len(surfaces)} surface(s)")
    return scene
