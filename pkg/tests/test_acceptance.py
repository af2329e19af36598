"""End-to-end experiments on the synthetic world (slow)."""

import numpy as np
import pytest

from src.pipeline.config_loader import load_config
from src.pipeline.workflow import run_ablation, run_experiment

pytestmark = pytest.mark.slow

CORRUPTED = [
    "scene=plane_sphere",
    "num_frames=6",
    "iterations=8",
    "corruption.outlier_fraction=0.1",
    "corruption.outlier_min=8.0",
    "corruption.outlier_max=15.0",
    "corruption.depth_noise_fraction=0.05",
]

# both runs settle at the solver's numerical floor; below this ATE the 2x ratio is noise
ATE_FLOOR_M = 1e-6


def test_closed_loop_restores_corrupted_flow():
    corrupted = run_experiment(load_config(None, CORRUPTED), write=False)
    clean = run_experiment(load_config(None, CORRUPTED + ["corruption.outlier_fraction=0.0"]), write=False)

    assert len(corrupted.trace) == 8
    restored = [row.corrupted_restored for row in corrupted.trace]
    assert restored[-1] >= 0.9
    assert not any(row.damping_exhausted for row in corrupted.trace)
    assert corrupted.metrics.ate <= max(2.0 * clean.metrics.ate, ATE_FLOOR_M)


def test_ablation_ordering(tmp_path):
    config = load_config(
        None,
        [
            "scene=plane_sphere",
            "num_frames=6",
            "iterations=8",
            "seeds=5",
            "corruption.outlier_fraction=0.05",
            "corruption.depth_noise_fraction=0.05",
            "corruption.occlusion_injection=true",
            "corruption.textureless_injection=true",
            "textureless_region=true",
        ],
    )
    rows = run_ablation(config, tmp_path)
    assert len(rows) == 8
    assert all(row.runs == 5 for row in rows)
    assert np.all(np.isfinite([r.chamfer for r in rows]))

    by_switch = {(r.bi_ba, r.m_node, r.m_edge): r.chamfer for r in rows}
    full = by_switch[(True, True, True)]
    bi_ba_only = by_switch[(True, False, False)]
    masks_only = by_switch[(False, True, True)]
    baseline = by_switch[(False, False, False)]
    assert full <= bi_ba_only <= masks_only <= baseline
    assert full <= 0.9 * baseline

    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "bi_ba,m_node,m_edge,runs,ate,accuracy,completion,chamfer"
    assert len(lines) == 9
