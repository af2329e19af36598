import numpy as np


def bilinear_sample(
    grid: np.ndarray,
    uv: np.ndarray,
    grid_valid: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """``grid`` (H, W) または (H, W, C) を連続画素位置でバイリニア補間する

    4近傍がすべて画像内にあり、（``grid_valid`` があれば）すべて有効なときだけ有効。
    無効なサンプルは0。

    Returns:
        (values, valid)
    """
    grid = np.asarray(grid, dtype=float)
    uv = np.asarray(uv, dtype=float)
    H, W = grid.shape[:2]
    x, y = uv[..., 0], uv[..., 1]
    valid = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)

    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = np.clip(np.floor(xs).astype(int), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(ys).astype(int), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = xs - x0
    ay = ys - y0

    if grid_valid is not None:
        gv = np.asarray(grid_valid, dtype=bool)
        valid &= gv[y0, x0] & gv[y0, x1] & gv[y1, x0] & gv[y1, x1]

    if grid.ndim == 3:
        ax = ax[..., None]
        ay = ay[..., None]
    values = (
        (1 - ay) * ((1 - ax) * grid[y0, x0] + ax * grid[y0, x1])
        + ay * ((1 - ax) * grid[y1, x0] + ax * grid[y1, x1])
    )
    mask = valid[..., None] if grid.ndim == 3 else valid
    return np.where(mask, values, 0.0), valid


def sample_depth(
    depth: np.ndarray,
    uv: np.ndarray,
    depth_valid: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """逆デプスを補間してデプスマップをサンプルする

    平面上では逆デプスが画素座標のアフィン関数になるため、平面は厳密に再現される。
    曲面では補間誤差が残る。無効なサンプルはデプス1を返す。
    """
    inv, valid = bilinear_sample(1.0 / np.asarray(depth, dtype=float), uv, depth_valid)
    valid &= inv > 0
    return np.where(valid, 1.0 / np.where(valid, inv, 1.0), 1.0), valid
