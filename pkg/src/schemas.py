"""Pydantic schemas for experiment configuration and reports"""

from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.geometry.camera import Intrinsics, default_intrinsics


class StrictModel(BaseModel):
    """未知キーを拒否する基底モデル"""

    model_config = ConfigDict(extra="forbid")


class BAConfig(StrictModel):
    """バンドル調整（Gauss-Newton / Levenberg）の設定"""

    inner_ba_steps: int = Field(default=2, ge=1, description="フロー更新1回あたりのBAステップ数")
    damping_init: float = Field(default=1e-4, ge=0.0, description="初期ダンピングλ₀")
    damping_increase: float = Field(default=10.0, gt=1.0, description="棄却時のλ倍率")
    damping_decrease: float = Field(default=0.5, gt=0.0, lt=1.0, description="受理時のλ倍率")
    max_damping: float = Field(default=1e8, gt=0.0, description="これを超えるとMaxDampingExceeded")
    depth_min: float = Field(default=1e-2, gt=0.0, description="デプスのクランプ下限（m）")
    depth_max: float = Field(default=1e3, gt=0.0, description="デプスのクランプ上限（m）")
    fixed_frame_ids: List[int] = Field(default_factory=lambda: [0], description="ゲージ固定するフレーム")
    fix_scale: bool = Field(default=True, description="固定フレームの平均逆デプスでスケールを固定")
    use_geometry: bool = Field(default=True, description="幾何整合性項（Bi-BA）を使う")
    geometry_tau: float = Field(default=1.0, gt=0.0, description="Ωの包含閾値τ（px）")
    huber_delta: float = Field(default=1.0, gt=0.0, description="Huberカーネルの膝（px）")
    z_min: float = Field(default=1e-3, gt=0.0, description="チェイラリティ閾値（m）")
    gradient_tol: float = Field(default=1e-9, ge=0.0, description="勾配ノルムがこれ未満なら収束")
    step_tol: float = Field(default=1e-12, ge=0.0, description="棄却ステップがこれ未満なら収束")
    cost_tol: float = Field(default=1e-16, ge=0.0, description="総コストがこれ以下なら収束")
    stall_tol: float = Field(default=1e-12, ge=0.0, description="棄却時の相対コスト増がこれ以下なら収束（丸め誤差）")

    @model_validator(mode="after")
    def check_depth_range(self) -> "BAConfig":
        if self.depth_min >= self.depth_max:
            raise ValueError("depth_min must be smaller than depth_max")
        return self


class ReliabilityConfig(StrictModel):
    """信頼度マスクの設定"""

    tau_edge: float = Field(default=5.0, gt=0.0, description="エッジマスク閾値（px）")
    tau_node: float = Field(default=5.0, gt=0.0, description="ノードマスク閾値（px）")
    use_edge_mask: bool = Field(default=True, description="Falseならm_edgeは常に1")
    use_node_mask: bool = Field(default=True, description="Falseならm_nodeは常に1")


class FrontendConfig(StrictModel):
    """相関ベースのフロー改善の設定"""

    radius: int = Field(default=3, ge=1, description="相関探索半径r（px）")
    step_cap: Optional[float] = Field(default=None, gt=0.0, description="1回の更新量上限（未指定ならr）")
    blend: float = Field(default=1.0, gt=0.0, le=1.0, description="非信頼領域で幾何フローへ寄せる割合")
    confidence_scale: float = Field(default=0.05, gt=0.0, description="ピーク鋭さ→ωの半値スケールκ")
    masked_confidence_cap: float = Field(default=0.5, ge=0.0, le=1.0, description="m=0画素のω上限")
    subpixel_at_center: bool = Field(default=False, description="中心ピークでもサブピクセル補正する")
    min_gain: float = Field(default=0.01, ge=0.0, description="中心から動くのに必要なスコア改善量")
    match_tolerance: float = Field(default=0.02, gt=0.0, description="移動先ピークに求める最低スコア（-tol以上）")
    track_radius: float = Field(default=1.0, ge=0.0, description="幾何フロー追従を続ける相関ピークとの距離（px）")
    hold_tolerance: float = Field(default=1e-3, ge=0.0, description="幾何フローと一致している信頼画素を動かさない許容差（px）")
    match_confidence_scale: float = Field(default=0.02, gt=0.0, description="ピーク一致度→ωの半値スケール")
    feature_noise: float = Field(default=0.02, ge=0.0, description="合成特徴量のノイズσ")

    @property
    def effective_step_cap(self) -> float:
        return float(self.radius) if self.step_cap is None else self.step_cap


class KeyframePolicy(StrictModel):
    """キーフレーム採用とエッジ構築の方針"""

    mode: Literal["batch", "online"] = Field(default="batch", description="エッジ構築パターン")
    window: int = Field(default=2, ge=1, description="バッチモードの時間距離（6フレームで18エッジ）")
    online_k: int = Field(default=3, ge=1, description="オンラインモードで接続する直近キーフレーム数")
    flow_threshold: float = Field(default=2.5, ge=0.0, description="採用に必要な平均フロー（px）")


class CorruptionPatch(StrictModel):
    """矩形パッチへの一定オフセット"""

    x: int = Field(ge=0)
    y: int = Field(ge=0)
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    du: float
    dv: float


class CorruptionSpec(StrictModel):
    """合成入力の劣化方法"""

    flow_noise_sigma: float = Field(default=0.0, ge=0.0, description="フローのガウスノイズσ（px）")
    patches: List[CorruptionPatch] = Field(default_factory=list, description="パッチ破損")
    outlier_fraction: float = Field(default=0.0, ge=0.0, le=1.0, description="外れ値画素の割合")
    outlier_min: float = Field(default=8.0, ge=0.0, description="外れ値オフセットの最小（px）")
    outlier_max: float = Field(default=15.0, ge=0.0, description="外れ値オフセットの最大（px）")
    depth_noise_fraction: float = Field(default=0.05, ge=0.0, lt=1.0, description="事前デプスの乗算ノイズ幅")
    occlusion_injection: bool = Field(default=False, description="遮蔽画素のフローを破損させる")
    textureless_injection: bool = Field(default=False, description="テクスチャなし領域のフローを破損させる")

    @model_validator(mode="after")
    def check_outlier_range(self) -> "CorruptionSpec":
        if self.outlier_min > self.outlier_max:
            raise ValueError("outlier_min must not exceed outlier_max")
        return self


class EvalConfig(StrictModel):
    """評価指標の設定"""

    with_scale: bool = Field(default=True, description="相似変換でアライメント")
    max_time_gap: float = Field(default=0.02, gt=0.0, description="タイムスタンプ対応付けの許容差（s）")
    cloud_clip: float = Field(default=0.5, gt=0.0, description="点群距離のクリップ（m）")
    auc_max_threshold: float = Field(default=0.5, gt=0.0, description="AUC閾値グリッドの上限（m）")
    auc_thresholds: int = Field(default=128, ge=1, description="AUC閾値の数")
    cloud_stride: int = Field(default=1, ge=1, description="点群生成時の画素間引き")


class AblationSwitches(StrictModel):
    """アブレーション用スイッチ"""

    bi_ba: bool = True
    m_edge: bool = True
    m_node: bool = True

    def label(self) -> str:
        return f"bi_ba={int(self.bi_ba)} m_node={int(self.m_node)} m_edge={int(self.m_edge)}"


class LoopConfig(StrictModel):
    """外側ループ1回分に必要な設定一式"""

    ba: BAConfig = Field(default_factory=BAConfig)
    reliability: ReliabilityConfig = Field(default_factory=ReliabilityConfig)
    frontend: FrontendConfig = Field(default_factory=FrontendConfig)


class ExperimentConfig(StrictModel):
    """実験設定（TOMLファイル + --set上書き）"""

    name: str = Field(default="run", description="実験名")
    scene: str = Field(default="plane_sphere", description="シーンプリセット名")
    trajectory: str = Field(default="lateral_arc", description="軌跡プリセット名")
    textureless_region: bool = Field(default=True, description="シーンにテクスチャなし矩形を置く")
    num_frames: int = Field(default=6, ge=3, description="フレーム数（軌跡アライメントに3以上必要）")
    iterations: int = Field(default=8, ge=0, description="外側ループの反復回数")
    seed: int = Field(default=0, ge=0, description="乱数シード")
    seeds: int = Field(default=5, ge=1, description="ablateで使うシード数")
    output_dir: Optional[str] = Field(default=None, description="出力先（未指定なら環境設定）")
    pose_noise_deg: float = Field(default=2.0, ge=0.0, description="初期姿勢の回転摂動（度）")
    pose_noise_m: float = Field(default=0.02, ge=0.0, description="初期姿勢の並進摂動（m）")
    intrinsics: Intrinsics = Field(default_factory=default_intrinsics)
    corruption: CorruptionSpec = Field(default_factory=CorruptionSpec)
    ba: BAConfig = Field(default_factory=BAConfig)
    reliability: ReliabilityConfig = Field(default_factory=ReliabilityConfig)
    frontend: FrontendConfig = Field(default_factory=FrontendConfig)
    keyframes: KeyframePolicy = Field(default_factory=KeyframePolicy)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationSwitches = Field(default_factory=AblationSwitches)

    @field_validator("scene")
    @classmethod
    def validate_scene(cls, v: str) -> str:
        from src.synth.world import SCENE_PRESETS

        if v not in SCENE_PRESETS:
            raise ValueError(f"unknown scene preset '{v}' (choose from {sorted(SCENE_PRESETS)})")
        return v

    @field_validator("trajectory")
    @classmethod
    def validate_trajectory(cls, v: str) -> str:
        from src.synth.world import TRAJECTORY_PRESETS

        if v not in TRAJECTORY_PRESETS:
            raise ValueError(f"unknown trajectory preset '{v}' (choose from {sorted(TRAJECTORY_PRESETS)})")
        return v

    @model_validator(mode="after")
    def check_patches_in_bounds(self) -> "ExperimentConfig":
        for patch in self.corruption.patches:
            if patch.x + patch.width > self.intrinsics.width or patch.y + patch.height > self.intrinsics.height:
                raise ValueError(f"corruption patch {patch.model_dump()} exceeds the image bounds")
        return self

    def loop_config(self) -> LoopConfig:
        """アブレーションスイッチを反映したループ設定"""
        return LoopConfig(
            ba=self.ba.model_copy(update={"use_geometry": self.ba.use_geometry and self.ablation.bi_ba}),
            reliability=self.reliability.model_copy(
                update={
                    "use_edge_mask": self.reliability.use_edge_mask and self.ablation.m_edge,
                    "use_node_mask": self.reliability.use_node_mask and self.ablation.m_node,
                }
            ),
            frontend=self.frontend,
        )


class TraceRow(BaseModel):
    """外側ループ1回分のトレース"""

    iteration: int
    cost: float
    ate: float
    mean_flow_error: float
    corrupted_restored: float
    edge_mask_ratio: float
    node_mask_ratio: float
    mask_ratio: float
    geo_inlier_ratio: float
    damping_exhausted: bool = False


class FinalMetrics(BaseModel):
    """最終評価指標"""

    ate: float
    auc: float
    accuracy: float
    completion: float
    chamfer: float
    depth_error: float


class RunReport(BaseModel):
    """実験1回分のレポート"""

    name: str
    trace: List[TraceRow] = Field(default_factory=list)
    metrics: FinalMetrics
    config: ExperimentConfig
    timings_ms: Dict[str, float] = Field(default_factory=dict)
    output_dir: Optional[str] = None


class AblationRow(BaseModel):
    """アブレーション1設定分（シード中央値）"""

    bi_ba: bool
    m_node: bool
    m_edge: bool
    runs: int
    ate: float
    accuracy: float
    completion: float
    chamfer: float
