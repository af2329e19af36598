"""Trajectory text files: ``timestamp tx ty tz qx qy qz qw`` per line."""

from pathlib import Path

import numpy as np

from src.errors import IoError, NonUnitQuaternion, ParseError
from src.eval.metrics import Trajectory
from src.geometry.se3 import Pose
from src.utils.logger import get_logger

logger = get_logger(__name__)

HEADER = "# timestamp tx ty tz qx qy qz qw"
QUATERNION_TOLERANCE = 1e-3


def parse_trajectory(text: str, source: str = "<string>") -> Trajectory:
    timestamps, poses = [], []
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.replace(",", " ").split()
        if len(fields) != 8:
            raise ParseError(f"{source}: expected 8 fields, got {len(fields)}", line_number)
        try:
            values = np.array([float(f) for f in fields])
        except ValueError as e:
            raise ParseError(f"{source}: {e}", line_number) from e
        if not np.all(np.isfinite(values)):
            raise ParseError(f"{source}: non-finite value", line_number)
        q = values[4:8]
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > QUATERNION_TOLERANCE:
            raise NonUnitQuaternion(f"{source}: line {line_number}: quaternion norm {norm:.6f}")
        timestamps.append(values[0])
        poses.append(Pose.from_quaternion(q / norm, values[1:4]))
    try:
        return Trajectory(np.array(timestamps), tuple(poses))
    except ValueError as e:
        raise ParseError(f"{source}: {e}") from e


def read_trajectory(path: str | Path) -> Trajectory:
    """軌跡ファイルを読み込む

    Raises:
        IoError: ファイルが読めない
        ParseError: 行の形式が不正（行番号付き）
        NonUnitQuaternion: クォータニオンのノルムが1から1e-3以上ずれている
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    traj = parse_trajectory(text, str(path))
    logger.debug(f"read {len(traj)} poses from {path}")
    return traj


def format_trajectory(traj: Trajectory) -> str:
    lines = [HEADER]
    for t, pose in zip(traj.timestamps, traj.poses):
        values = [t, *pose.translation, *pose.quaternion()]
        lines.append(" ".join(f"{v:.17g}" for v in values))
    return "\n".join(lines) + "\n"


def write_trajectory(traj: Trajectory, path: str | Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_trajectory(traj), encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
