from dataclasses import dataclass

import numpy as np

from src.ba.residuals import FlowField
from src.errors import ConfigError
from src.schemas import CorruptionSpec


@dataclass(frozen=True)
class CorruptionInputs:
    flow: FlowField | None = None
    depth: np.ndarray | None = None
    occluded: np.ndarray | None = None
    textureless: np.ndarray | None = None


@dataclass(frozen=True)
class CorruptionResult:
    flow: FlowField | None
    prior_depth: np.ndarray | None
    corrupted: np.ndarray | None  # pixels whose flow got a structured offset


def _random_offsets(rng: np.random.Generator, count: int, spec: CorruptionSpec) -> np.ndarray:
    magnitude = rng.uniform(spec.outlier_min, spec.outlier_max, size=count)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=count)
    return np.stack([magnitude * np.cos(angle), magnitude * np.sin(angle)], axis=-1)


def corrupt(inputs: CorruptionInputs, spec: CorruptionSpec, seed: int | np.random.SeedSequence) -> CorruptionResult:
    """入力フロー・事前デプスを劣化させる

    ノイズ → パッチ → 外れ値 → 遮蔽 → テクスチャなし領域の順で適用する。
    ガウスノイズは破損マスクに含めない。

    Args:
        inputs: 劣化対象（フロー、デプス、遮蔽/テクスチャなしマスク）
        spec: 劣化方法
        seed: 乱数シード

    Returns:
        CorruptionResult: 劣化後のフロー・事前デプスと破損画素マスク

    Raises:
        ConfigError: パッチが画像外にはみ出す
    """
    rng = np.random.default_rng(seed)
    flow_out, mask = None, None

    if inputs.flow is not None:
        F = np.array(inputs.flow.flow, dtype=float)
        H, W = F.shape[:2]
        mask = np.zeros((H, W), dtype=bool)
        if spec.flow_noise_sigma > 0:
            F += rng.normal(0.0, spec.flow_noise_sigma, size=F.shape)
        for patch in spec.patches:
            if patch.x + patch.width > W or patch.y + patch.height > H:
                raise ConfigError(f"corruption patch at ({patch.x}, {patch.y}) exceeds {W}x{H}")
            sl = (slice(patch.y, patch.y + patch.height), slice(patch.x, patch.x + patch.width))
            F[sl] += (patch.du, patch.dv)
            mask[sl] = True
        if spec.outlier_fraction > 0:
            count = int(round(spec.outlier_fraction * H * W))
            idx = rng.choice(H * W, size=count, replace=False)
            rows, cols = np.divmod(idx, W)
            F[rows, cols] += _random_offsets(rng, count, spec)
            mask[rows, cols] = True
        for enabled, region in ((spec.occlusion_injection, inputs.occluded), (spec.textureless_injection, inputs.textureless)):
            if enabled and region is not None and np.any(region):
                rows, cols = np.nonzero(region)
                F[rows, cols] += _random_offsets(rng, len(rows), spec)
                mask[rows, cols] = True
        flow_out = inputs.flow.with_flow(F)

    prior = None
    if inputs.depth is not None:
        D = np.asarray(inputs.depth, dtype=float)
        if spec.depth_noise_fraction > 0:
            f = spec.depth_noise_fraction
            prior = D * (1.0 + rng.uniform(-f, f, size=D.shape))
        else:
            prior = D.copy()

    return CorruptionResult(flow=flow_out, prior_depth=prior, corrupted=mask)


def edge_seed(seed: int, source_id: int, target_id: int) -> np.random.SeedSequence:
    """有向エッジごとの独立な乱数列（生成順に依存しない）"""
    return np.random.SeedSequence([seed, source_id, target_id])


def frame_seed(seed: int, frame_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, frame_id, 1_000_003])


def pose_seed(seed: int, frame_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, frame_id, 2_000_003])
