"""Perception and push planning for clearing branches that hide a fruit."""

from .errors import BranchPushError, NoCandidate, StageError
from .geometry import CameraIntrinsics, align_to_axis, project, unproject

__version__ = "0.1.0"

__all__ = [
    "BranchPushError",
    "CameraIntrinsics",
    "NoCandidate",
    "StageError",
    "align_to_axis",
    "project",
    "unproject",
]
