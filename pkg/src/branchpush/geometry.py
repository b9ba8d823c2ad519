"""Pinhole camera model and rotation helpers.

Conventions: the camera frame has z along the optical axis, x to the right
and y down, matching image (u, v) = (column, row).  Pixel coordinates are
real-valued so that sub-pixel centroids can be carried around.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, DegenerateDepth

AXIS_EPS = 1e-12
Z_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Undistorted pinhole camera: focal length and principal point in pixels."""

    f: float
    u0: float
    v0: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.f > 0):
            raise ConfigError(f"focal length must be positive, got {self.f}")
        if not (0 <= self.u0 < self.width and 0 <= self.v0 < self.height):
            raise ConfigError(
                f"principal point ({self.u0}, {self.v0}) outside "
                f"{self.width}x{self.height} image"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        try:
            return cls(
                f=float(d["f"]),
                u0=float(d["u0"]),
                v0=float(d["v0"]),
                width=int(d["width"]),
                height=int(d["height"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad intrinsics: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def project(uvz, k: CameraIntrinsics) -> np.ndarray:
    """Map pixel + depth triples ``(..., 3)`` to camera-frame points ``(..., 3)``."""
    uvz = np.asarray(uvz, dtype=np.float64)
    u, v, z = uvz[..., 0], uvz[..., 1], uvz[..., 2]
    x = (u - k.u0) / k.f * z
    y = (v - k.v0) / k.f * z
    return np.stack([x, y, z], axis=-1)


def unproject(xyz, k: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`project`: camera-frame points to ``(u, v, z)``.

    Raises DegenerateDepth if any point has z == 0.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    z = xyz[..., 2]
    if np.any(z == 0):
        raise DegenerateDepth("cannot back-project a point at z = 0")
    u = xyz[..., 0] * k.f / z + k.u0
    v = xyz[..., 1] * k.f / z + k.v0
    return np.stack([u, v, z], axis=-1)


def skew(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def rodrigues_rotation(axis, angle: float) -> np.ndarray:
    """Rotation matrix for ``angle`` radians about ``axis`` (normalized here).

    A (near) zero axis yields the identity.
    """
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm < AXIS_EPS:
        return np.eye(3)
    K = skew(axis / norm)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def _orthogonal_axis(n: np.ndarray) -> np.ndarray:
    # cross with the basis vector of the smallest |component| is never degenerate
    e = np.zeros(3)
    e[int(np.argmin(np.abs(n)))] = 1.0
    a = np.cross(n, e)
    return a / np.linalg.norm(a)


def align_to_axis(n, target) -> np.ndarray:
    """Rotation R with ``R @ n_hat == target_hat``.

    The rotation axis is ``n x target`` and the angle comes from the
    normalized dot product.  Antiparallel inputs rotate by pi about a
    deterministic axis orthogonal to ``n``.
    """
    n = np.asarray(n, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    n = n / np.linalg.norm(n)
    t = t / np.linalg.norm(t)
    cross = np.cross(n, t)
    s = np.linalg.norm(cross)
    c = float(np.dot(n, t))
    if s < AXIS_EPS:
        if c > 0:
            return np.eye(3)
        return rodrigues_rotation(_orthogonal_axis(n), np.pi)
    return rodrigues_rotation(cross, np.arctan2(s, c))
