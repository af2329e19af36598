from dataclasses import dataclass
from typing import Mapping

import numpy as np

from src.ba.residuals import Edge, EdgeResiduals
from src.errors import NoNeighbors
from src.schemas import ReliabilityConfig


@dataclass(frozen=True)
class ReliabilityMask:
    """有向エッジ (i, j) の二値ゲート（``m_node`` はフレームiのもの）"""

    source_id: int
    target_id: int
    m_edge: np.ndarray
    m_node: np.ndarray
    m: np.ndarray


def edge_mask(r_flow_magnitude: np.ndarray, valid: np.ndarray, tau_edge: float = 5.0) -> np.ndarray:
    """有効画素かつフロー残差がtau_edge未満なら1"""
    return np.asarray(valid, dtype=bool) & (np.asarray(r_flow_magnitude, dtype=float) < tau_edge)


def node_mask(residuals: Mapping[Edge, EdgeResiduals], frame_id: int, tau_node: float = 5.0) -> np.ndarray:
    """``frame_id`` の出力隣接ノードでの幾何残差の平均がtau_node未満なら1

    あるエッジで幾何残差のない画素は、そのエッジ分としてtau_nodeを加える。

    Raises:
        NoNeighbors: 出力エッジが存在しない
    """
    edges = [res for (i, _), res in sorted(residuals.items()) if i == frame_id]
    if not edges:
        raise NoNeighbors(f"frame {frame_id} has no out-neighbours")
    total = np.zeros(edges[0].r_geo.shape)
    for res in edges:
        total += np.where(res.geo_valid, res.r_geo, tau_node)
    return total / len(edges) < tau_node


def combine(m_edge: np.ndarray, m_node: np.ndarray) -> np.ndarray:
    return np.logical_and(m_edge, m_node)


def build_masks(
    residuals: Mapping[Edge, EdgeResiduals],
    config: ReliabilityConfig,
) -> dict[Edge, ReliabilityMask]:
    """全エッジのエッジ・ノード・統合マスク（無効化したマスクはすべて1）"""
    node_cache: dict[int, np.ndarray] = {}
    masks = {}
    for (i, j), res in sorted(residuals.items()):
        if config.use_edge_mask:
            m_edge = edge_mask(res.flow_magnitude, res.valid, config.tau_edge)
        else:
            m_edge = np.ones(res.valid.shape, dtype=bool)
        if config.use_node_mask:
            if i not in node_cache:
                node_cache[i] = node_mask(residuals, i, config.tau_node)
            m_node = node_cache[i]
        else:
            m_node = np.ones(res.valid.shape, dtype=bool)
        masks[(i, j)] = ReliabilityMask(i, j, m_edge, m_node, combine(m_edge, m_node))
    return masks


def mask_statistics(masks: Mapping[Edge, ReliabilityMask], residuals: Mapping[Edge, EdgeResiduals]) -> dict[str, float]:
    """各ゲートを通る有効画素の割合と、Omegaのインライア率"""
    totals = {"edge_mask_ratio": 0, "node_mask_ratio": 0, "mask_ratio": 0, "geo_inlier_ratio": 0}
    valid_count = 0
    for edge, mask in masks.items():
        valid = residuals[edge].valid
        valid_count += int(np.count_nonzero(valid))
        totals["edge_mask_ratio"] += int(np.count_nonzero(mask.m_edge & valid))
        totals["node_mask_ratio"] += int(np.count_nonzero(mask.m_node & valid))
        totals["mask_ratio"] += int(np.count_nonzero(mask.m & valid))
        totals["geo_inlier_ratio"] += int(np.count_nonzero(residuals[edge].omega_set))
    if valid_count == 0:
        return {name: 0.0 for name in totals}
    return {name: count / valid_count for name, count in totals.items()}
