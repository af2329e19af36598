from src.geometry.camera import (
    Z_MIN,
    Intrinsics,
    backproject,
    default_intrinsics,
    induced_flow,
    project,
    project_masked,
    transform_project,
)
from src.geometry.se3 import Pose, adjoint, compose, exp, inverse, log, look_at, relative

__all__ = [
    "Z_MIN",
    "Intrinsics",
    "Pose",
    "adjoint",
    "backproject",
    "compose",
    "default_intrinsics",
    "exp",
    "induced_flow",
    "inverse",
    "log",
    "look_at",
    "project",
    "project_masked",
    "relative",
    "transform_project",
]
