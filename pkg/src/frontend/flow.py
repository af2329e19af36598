"""相関ボリュームによる決定的なフロー改善

信頼画素（m = 1）は現在の対応先まわりの局所相関窓でサブピクセルのピークへ動く。
ただしピークが明確で、十分よく一致しているときに限る。そうでなければフローを保つ。
非信頼画素（m = 0）は相関スコアを見ずに、デプスと現在の姿勢から誘導されるフローを取る。
そうして置き換えた画素は、相関ピークが近くにある間は幾何フローに追従し続ける。
"""

from dataclasses import dataclass

import numpy as np

from src.ba.residuals import FlowField
from src.geometry.camera import Z_MIN, Intrinsics, induced_flow
from src.geometry.se3 import Pose


@dataclass(frozen=True)
class PriorNoiseModel:
    """幾何事前情報が真のデプスからどれだけずれているか"""

    kind: str = "multiplicative_uniform"
    fraction: float = 0.0

    @property
    def confidence(self) -> float:
        """事前デプス由来のフローに与える信頼度（0〜1）"""
        return float(np.clip(1.0 - 10.0 * self.fraction, 0.0, 1.0))


@dataclass(frozen=True)
class GeometryPrior:
    prior_depth: np.ndarray
    frame_id: int
    noise: PriorNoiseModel = PriorNoiseModel()

    def __post_init__(self):
        if not np.all(np.asarray(self.prior_depth) > 0):
            raise ValueError("prior depth must be positive")


@dataclass(frozen=True)
class CorrelationVolume:
    """scores[y, x, 1 + r + dy, ... ] layout: (H, W, 2r+1, 2r+1) indexed [dy, dx]."""

    scores: np.ndarray
    radius: int
    targets: np.ndarray  # (H, W, 2) window centers u + F(u)

    @property
    def window(self) -> int:
        return 2 * self.radius + 1

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        r = self.radius
        dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
        return dx.ravel().astype(float), dy.ravel().astype(float)


@dataclass(frozen=True)
class RefinedFlow:
    flow: FlowField
    delta: np.ndarray
    proposal: np.ndarray
    proposal_valid: np.ndarray
    tracking: np.ndarray  # pixels whose flow now follows the geometry


def correlation_volume(features_i: np.ndarray, features_j: np.ndarray, flow: FlowField | np.ndarray, radius: int = 3) -> CorrelationVolume:
    """d in [-r, r]^2 について score(u, d) = -mean_c (f_i(u) - f_j(u + F(u) + d))^2

    f_jはバイリニアでサンプルする。[0, W-1] x [0, H-1] の外はスコア-inf。
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    f_i = np.asarray(features_i, dtype=float)
    f_j = np.asarray(features_j, dtype=float)
    F = flow.flow if isinstance(flow, FlowField) else np.asarray(flow, dtype=float)
    H, W, _ = f_i.shape
    v, u = np.mgrid[0:H, 0:W].astype(float)
    tx = u + F[..., 0]
    ty = v + F[..., 1]
    finite = np.isfinite(tx) & np.isfinite(ty)
    tx = np.where(finite, tx, -1e6)
    ty = np.where(finite, ty, -1e6)

    base_x = np.floor(tx)
    base_y = np.floor(ty)
    fx = (tx - base_x)[..., None, None, None]
    fy = (ty - base_y)[..., None, None, None]
    steps = np.arange(-radius, radius + 2)
    xs = np.clip(base_x[..., None] + steps, 0, W - 1).astype(int)  # (H, W, K+1)
    ys = np.clip(base_y[..., None] + steps, 0, H - 1).astype(int)
    G = f_j[ys[:, :, :, None], xs[:, :, None, :]]  # (H, W, K+1, K+1, C)
    sampled = (
        (1 - fy) * (1 - fx) * G[:, :, :-1, :-1]
        + (1 - fy) * fx * G[:, :, :-1, 1:]
        + fy * (1 - fx) * G[:, :, 1:, :-1]
        + fy * fx * G[:, :, 1:, 1:]
    )
    scores = -np.mean((f_i[:, :, None, None, :] - sampled) ** 2, axis=-1)

    offs = np.arange(-radius, radius + 1)
    in_x = (tx[..., None] + offs >= 0) & (tx[..., None] + offs <= W - 1)
    in_y = (ty[..., None] + offs >= 0) & (ty[..., None] + offs <= H - 1)
    inside = in_y[:, :, :, None] & in_x[:, :, None, :]
    scores = np.where(inside, scores, -np.inf)
    return CorrelationVolume(scores=scores, radius=radius, targets=np.stack([tx, ty], axis=-1))


def masked_scores(corr: CorrelationVolume, mask: np.ndarray) -> np.ndarray:
    """corr * M（非信頼画素の窓はすべて0）"""
    return np.where(np.asarray(mask, dtype=bool)[..., None, None], corr.scores, 0.0)


def _peak_offsets(
    scores: np.ndarray,
    radius: int,
    subpixel_at_center: bool,
    min_gain: float = 0.0,
    match_tolerance: float = np.inf,
) -> tuple[np.ndarray, np.ndarray]:
    """サブピクセルのピークオフセット (H, W, 2) と窓中心が有限だったか

    中心以外のピークは、中心スコアを ``min_gain`` 以上上回り、かつスコアが
    ``-match_tolerance`` 以上のときだけ採用する。それ以外のオフセットは0。
    """
    H, W, K, _ = scores.shape
    dy, dx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    dx, dy = dx.ravel(), dy.ravel()
    # nearest offsets first so ties resolve toward the current flow
    order = np.lexsort((np.arange(K * K), dx**2 + dy**2))
    flat = scores.reshape(H, W, K * K)[..., order]
    best = order[np.argmax(flat, axis=-1)]
    iy, ix = np.divmod(best, K)

    center = scores[:, :, radius, radius]
    center_ok = np.isfinite(center)
    peak = scores.reshape(H, W, K * K)[np.arange(H)[:, None], np.arange(W)[None, :], best]
    rows, cols = np.arange(H)[:, None], np.arange(W)[None, :]

    def parabola(lo, hi):
        denom = lo - 2.0 * peak + hi
        ok = np.isfinite(lo) & np.isfinite(hi) & (denom < 0)
        off = np.where(ok, 0.5 * (lo - hi) / np.where(ok, denom, -1.0), 0.0)
        return np.clip(off, -0.5, 0.5)

    left = np.where(ix > 0, scores[rows, cols, iy, np.maximum(ix - 1, 0)], np.nan)
    right = np.where(ix < K - 1, scores[rows, cols, iy, np.minimum(ix + 1, K - 1)], np.nan)
    up = np.where(iy > 0, scores[rows, cols, np.maximum(iy - 1, 0), ix], np.nan)
    down = np.where(iy < K - 1, scores[rows, cols, np.minimum(iy + 1, K - 1), ix], np.nan)

    at_center = (ix == radius) & (iy == radius)
    use_sub = ~at_center | subpixel_at_center
    sub_x = np.where(use_sub, parabola(left, right), 0.0)
    sub_y = np.where(use_sub, parabola(up, down), 0.0)
    offset = np.stack([ix - radius + sub_x, iy - radius + sub_y], axis=-1)

    with np.errstate(invalid="ignore"):
        decisive = (peak - center >= min_gain) & (peak >= -match_tolerance)
    keep = center_ok & (at_center | decisive)
    return np.where(keep[..., None], offset, 0.0), center_ok


def geometry_prior_flow(
    prior_depth: np.ndarray,
    T_ji: Pose,
    k: Intrinsics,
    confidence: float = 1.0,
    source_id: int = 0,
    target_id: int = 1,
    z_min: float = Z_MIN,
) -> tuple[FlowField, np.ndarray]:
    """事前デプスから誘導されるフロー pi(T_ji pi^-1(u, D_prior(u))) - u

    FlowField（チェイラリティ違反の信頼度は0）と有効マスクを返す。
    """
    flow, valid = induced_flow(prior_depth, T_ji, k, z_min)
    conf = np.where(valid, float(confidence), 0.0)
    return FlowField(flow, conf, source_id, target_id), valid


def refine_flow(
    corr: CorrelationVolume,
    mask: np.ndarray,
    prior: GeometryPrior,
    T_ji: Pose,
    k: Intrinsics,
    flow: FlowField,
    step_cap: float | None = None,
    blend: float = 1.0,
    subpixel_at_center: bool = False,
    min_gain: float = 0.0,
    match_tolerance: float = np.inf,
    tracking: np.ndarray | None = None,
    track_radius: float = 1.0,
    hold_tolerance: float | None = None,
) -> RefinedFlow:
    """改善ステップ1回 F <- F + dF

    Args:
        corr: 現在のフロー周りの相関ボリューム
        mask: 信頼度マスクm（True=信頼）
        prior: 非信頼画素の置換に使うデプス（ループ内では現在のデプス推定）
        T_ji: 現在の相対姿勢
        k: 内部パラメータ
        flow: 現在のフロー
        step_cap: 信頼領域での更新量上限（未指定なら相関半径）
        blend: 非信頼領域で幾何フローへ寄せる割合（1=置換）
        subpixel_at_center: 中心ピークでもサブピクセル補正するか
        min_gain: 中心からピークへ動くのに必要なスコア差
        match_tolerance: ピークのスコアがこれより悪い（-tol未満）なら動かない
        tracking: 前回幾何フローで置き換えた画素。相関ピークが幾何フローから
            track_radius以内なら、信頼画素でも幾何フローに追従させる
        track_radius: 追従を続ける相関ピークと幾何フローの距離（px）
        hold_tolerance: 現在の幾何フローとの差がこれ以下の信頼画素は動かさない（px）

    Returns:
        RefinedFlow: 更新後のフロー（信頼度は据え置き）、更新量、追従マップ
    """
    mask = np.asarray(mask, dtype=bool)
    cap = float(corr.radius) if step_cap is None else float(step_cap)
    F = flow.flow

    scores = masked_scores(corr, mask)
    offset, _ = _peak_offsets(scores, corr.radius, subpixel_at_center, min_gain, match_tolerance)
    norm = np.linalg.norm(offset, axis=-1, keepdims=True)
    offset = np.where(norm > cap, offset * cap / np.where(norm > 0, norm, 1.0), offset)
    reliable = F + offset

    proposal, proposal_valid = geometry_prior_flow(prior.prior_depth, T_ji, k, source_id=flow.source_id, target_id=flow.target_id)
    P = proposal.flow
    if blend >= 1.0:
        towards = P
    else:
        towards = F + blend * (P - F)
    unreliable = np.where(proposal_valid[..., None], towards, F)

    if hold_tolerance is not None:
        settled = proposal_valid & (np.linalg.norm(F - P, axis=-1) <= hold_tolerance)
        reliable = np.where(settled[..., None], F, reliable)

    followed = np.zeros(mask.shape, dtype=bool) if tracking is None else np.asarray(tracking, dtype=bool)
    agrees = np.linalg.norm(reliable - P, axis=-1) <= track_radius
    follow = mask & followed & proposal_valid & agrees
    reliable = np.where(follow[..., None], towards, reliable)

    new_flow = np.where(mask[..., None], reliable, unreliable)
    return RefinedFlow(
        flow=flow.with_flow(new_flow),
        delta=new_flow - F,
        proposal=P,
        proposal_valid=proposal_valid,
        tracking=np.where(mask, follow, proposal_valid),
    )


def predict_confidence(
    corr: CorrelationVolume,
    mask: np.ndarray,
    scale: float = 0.05,
    masked_cap: float = 0.5,
    prior_confidence: float | np.ndarray | None = None,
    match_scale: float | None = None,
) -> np.ndarray:
    """ピークの鋭さから信頼度を出す: w = gap / (gap + scale)

    ``gap`` は最良オフセットから他の有限オフセットへの平均スコア低下量。
    ``match_scale`` があれば match_scale / (match_scale - best) も掛けるので、
    鋭くても一致の悪いピークは重みが小さくなる。非信頼画素は事前情報の信頼度を
    ``masked_cap`` で頭打ちにして使う。
    """
    scores = corr.scores
    H, W = scores.shape[:2]
    flat = scores.reshape(H, W, -1)
    finite = np.isfinite(flat)
    n_finite = finite.sum(axis=-1)
    best = np.max(np.where(finite, flat, -np.inf), axis=-1)
    drops = np.where(finite, best[..., None] - np.where(finite, flat, 0.0), 0.0)
    others = np.maximum(n_finite - 1, 1)
    gap = np.where(n_finite > 1, drops.sum(axis=-1) / others, 0.0)
    omega = gap / (gap + scale)
    if match_scale is not None:
        mismatch = np.where(np.isfinite(best), np.maximum(-best, 0.0), np.inf)
        omega = omega * match_scale / (match_scale + mismatch)

    mask = np.asarray(mask, dtype=bool)
    fallback = omega if prior_confidence is None else np.broadcast_to(np.asarray(prior_confidence, dtype=float), omega.shape)
    masked = np.minimum(fallback, masked_cap)
    return np.clip(np.where(mask, omega, masked), 0.0, 1.0)
