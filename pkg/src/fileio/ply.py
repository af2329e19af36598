from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement, PlyHeaderParseError, PlyParseError

from src.errors import EmptyCloud, IoError, ParseError
from src.eval.metrics import PointCloud

VERTEX_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4")])


def vertex_element(points: np.ndarray) -> PlyElement:
    vertex = np.empty(len(points), dtype=VERTEX_DTYPE)
    for axis, name in enumerate(("x", "y", "z")):
        vertex[name] = points[:, axis]
    return PlyElement.describe(vertex, "vertex")


def export_ply(cloud: PointCloud | np.ndarray, path: str | Path) -> None:
    """x, y, z をリトルエンディアンのfloat32で書き出す

    Raises:
        EmptyCloud: 点群が空
        IoError: 書き込み失敗
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyCloud("refusing to write an empty point cloud")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        PlyData([vertex_element(points)], text=False, byte_order="<").write(str(path))
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_ply(path: str | Path) -> PointCloud:
    """PLY（バイナリ/ASCII）の頂点x, y, zを読む。他の頂点プロパティは無視する。

    Raises:
        IoError: 読み込み失敗
        ParseError: PLYとして解釈できない
    """
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except PlyHeaderParseError as e:
        raise ParseError(f"{path}: not a PLY file ({e})", getattr(e, "line", None)) from e
    except PlyParseError as e:
        raise ParseError(f"{path}: truncated or malformed vertex data ({e})") from e

    if "vertex" not in ply:
        raise ParseError(f"{path}: missing vertex element")
    vertex = ply["vertex"]
    names = {prop.name for prop in vertex.properties}
    if not {"x", "y", "z"} <= names:
        raise ParseError(f"{path}: missing x/y/z vertex properties")
    return PointCloud(np.column_stack([np.asarray(vertex[axis], dtype=float) for axis in ("x", "y", "z")]))
