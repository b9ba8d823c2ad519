"""View frustum reasoning and push planning.

The frustum is the elliptic cone with apex at the camera centre whose axis
points at the estimated fruit centre ``p_c``.  In the fruit frame (z along
``p_c``) a point is inside when

    x^2 / a^2 + y^2 / b^2 <= z^2 / L^2,   0 <= z <= L,   L = |p_c|

with ``a``, ``b`` the fruit width and height converted to meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from .errors import ConfigError, EmptyMask, NoCandidate
from .geometry import Z_AXIS, CameraIntrinsics, align_to_axis, project, unproject
from .hough import Segment2D, Segment3D
from .imaging import RoiBox

N_ANGLES = 90
REFINE_ROUNDS = 3
REFINE_POINTS = 9
LINE_SAMPLES = 257
EE_TILT = math.pi / 4


@dataclass(frozen=True)
class DecisionParams:
    d_v: float = 0.05

    def __post_init__(self):
        if not (self.d_v > 0):
            raise ConfigError(f"d_V must be positive, got {self.d_v}")

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionParams":
        unknown = set(d) - {"d_v"}
        if unknown:
            raise ConfigError(f"unknown decision keys: {sorted(unknown)}")
        try:
            return cls(**{key: float(val) for key, val in d.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad decision params: {exc}") from exc

    def to_dict(self) -> dict:
        return {"d_v": self.d_v}


@dataclass(frozen=True)
class ViewFrustum:
    p_c: np.ndarray
    semi_axes: tuple[float, float]
    rotation: np.ndarray  # maps the camera z axis onto p_c

    @property
    def axis(self) -> np.ndarray:
        return self.p_c / self.axis_length

    @property
    def axis_length(self) -> float:
        return float(np.linalg.norm(self.p_c))

    @classmethod
    def from_fruit(cls, p_c, width_px: float, height_px: float,
                   k: CameraIntrinsics) -> "ViewFrustum":
        p_c = np.asarray(p_c, dtype=np.float64)
        if not (np.linalg.norm(p_c) > 0 and p_c[2] > 0):
            raise ValueError("fruit centre must lie in front of the camera")
        a = width_px * p_c[2] / k.f
        b = height_px * p_c[2] / k.f
        if not (a > 0 and b > 0):
            raise ValueError("fruit width and height must be positive")
        return cls(p_c, (float(a), float(b)), align_to_axis(Z_AXIS, p_c))

    def to_dict(self) -> dict:
        return {"p_c": self.p_c.tolist(), "semi_axes": list(self.semi_axes),
                "axis_length": self.axis_length}


def to_fruit_frame(p, frustum: ViewFrustum) -> np.ndarray:
    """Camera-frame points ``(..., 3)`` to the frame whose z axis points at the fruit."""
    return np.asarray(p, dtype=np.float64) @ frustum.rotation


def inside_frustum(p, frustum: ViewFrustum) -> np.ndarray:
    q = to_fruit_frame(p, frustum)
    a, b = frustum.semi_axes
    length = frustum.axis_length
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    return ((x / a) ** 2 + (y / b) ** 2 <= (z / length) ** 2) & (z >= 0) & (z <= length)


def _generator_distance(q: np.ndarray, phi: np.ndarray, a, b, length) -> np.ndarray:
    # distance from q (n, 3) to the cone generators at angles phi (n, m)
    g = np.stack([a * np.cos(phi), b * np.sin(phi), np.full_like(phi, length)], axis=-1)
    s = np.clip(np.einsum("nk,nmk->nm", q, g) / np.einsum("nmk,nmk->nm", g, g), 0.0, 1.0)
    return np.linalg.norm(q[:, None, :] - s[..., None] * g, axis=-1)


def _boundary_distance(q: np.ndarray, frustum: ViewFrustum) -> np.ndarray:
    a, b = frustum.semi_axes
    length = frustum.axis_length
    n = len(q)
    step = 2 * math.pi / N_ANGLES
    phi = np.broadcast_to(np.arange(N_ANGLES) * step, (n, N_ANGLES))
    dist = _generator_distance(q, phi, a, b, length)
    best = np.argmin(dist, axis=1)
    centre = phi[np.arange(n), best]
    lateral = dist[np.arange(n), best]
    offsets = np.linspace(-1.0, 1.0, REFINE_POINTS)
    for _ in range(REFINE_ROUNDS):
        trial = centre[:, None] + step * offsets[None, :]
        d = _generator_distance(q, trial, a, b, length)
        j = np.argmin(d, axis=1)
        improved = d[np.arange(n), j] < lateral
        lateral = np.where(improved, d[np.arange(n), j], lateral)
        centre = np.where(improved, trial[np.arange(n), j], centre)
        step /= (REFINE_POINTS - 1) / 2
    over_cap = (q[:, 0] / a) ** 2 + (q[:, 1] / b) ** 2 <= 1.0
    cap = np.where(over_cap, np.abs(q[:, 2] - length), np.inf)
    return np.minimum(lateral, cap)


def frustum_distance(p, frustum: ViewFrustum):
    """Signed distance to the frustum surface: negative inside, positive outside.

    Accepts a single point or an ``(n, 3)`` array.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    q = to_fruit_frame(pts, frustum)
    d = _boundary_distance(q, frustum)
    d = np.where(inside_frustum(pts, frustum), -d, d)
    return float(d[0]) if single else d


@dataclass(frozen=True)
class CandidateLine:
    segment: Segment3D
    projected: Segment2D
    gamma: float
    distance: float  # minimum signed frustum distance over the segment
    index: int

    def to_dict(self) -> dict:
        return {"index": self.index, "gamma": self.gamma, "distance": self.distance,
                "segment": self.segment.to_dict(), "projected": self.projected.to_dict()}


def _point_at(seg: Segment3D, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)[..., None]
    return seg.p1 * (1.0 - t) + seg.p2 * t


def closest_on_segment(seg: Segment3D, frustum: ViewFrustum) -> tuple[float, float]:
    """Parameter ``t`` in [0, 1] and value of the minimum frustum distance along ``seg``."""
    ts = np.linspace(0.0, 1.0, LINE_SAMPLES)
    d = frustum_distance(_point_at(seg, ts), frustum)
    i = int(np.argmin(d))
    lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, len(ts) - 1)]
    res = minimize_scalar(lambda t: frustum_distance(_point_at(seg, t), frustum),
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
    if res.fun < d[i]:
        return float(res.x), float(res.fun)
    return float(ts[i]), float(d[i])


def project_segment(seg: Segment3D, k: CameraIntrinsics) -> Segment2D:
    uv = unproject(np.array([seg.p1, seg.p2]), k)[:, :2]
    d = uv[1] - uv[0]
    theta = math.atan2(d[0], -d[1]) % math.pi  # normal angle of the image line
    rho = float(uv[0] @ np.array([math.cos(theta), math.sin(theta)]))
    return Segment2D(tuple(uv[0]), tuple(uv[1]), rho, theta, seg.votes)


def line_gamma(projected: Segment2D, o_f) -> float:
    d = np.subtract(projected.p2, projected.p1)
    norm = np.linalg.norm(d)
    if norm == 0:
        return -math.pi / 2
    alpha = math.acos(min(abs(float(d @ np.asarray(o_f)) / norm), 1.0))
    return alpha - math.pi / 2


def evaluate_lines(lines: Sequence[Segment3D], frustum: ViewFrustum, o_f, z_c: float,
                   k: CameraIntrinsics, params: DecisionParams
                   ) -> tuple[list[CandidateLine], list[CandidateLine]]:
    """Score every line; returns ``(all_scored, candidates)`` where candidates pass both filters."""
    scored, kept = [], []
    for i, seg in enumerate(lines):
        _, dist = closest_on_segment(seg, frustum)
        proj = project_segment(seg, k)
        cand = CandidateLine(seg, proj, line_gamma(proj, o_f), dist, i)
        scored.append(cand)
        if dist < params.d_v and min(seg.p1[2], seg.p2[2]) < z_c:
            kept.append(cand)
    return scored, kept


def select_push_line(lines: Sequence[Segment3D], frustum: ViewFrustum, o_f, z_c: float,
                     k: CameraIntrinsics, params: DecisionParams = DecisionParams()
                     ) -> CandidateLine:
    """The near-frustum line in front of the fruit most perpendicular to the view gradient."""
    _, kept = evaluate_lines(lines, frustum, o_f, z_c, k, params)
    if not kept:
        raise NoCandidate(f"none of {len(lines)} lines is within d_V of the frustum "
                          "and in front of the fruit")
    return min(kept, key=lambda c: (abs(c.gamma), c.distance, -c.segment.length, c.index))


def _bisect_crossing(seg: Segment3D, frustum: ViewFrustum, t0: float, t1: float,
                     iters: int = 60) -> float:
    in0 = bool(inside_frustum(_point_at(seg, t0), frustum))
    for _ in range(iters):
        mid = 0.5 * (t0 + t1)
        if bool(inside_frustum(_point_at(seg, mid), frustum)) == in0:
            t0 = mid
        else:
            t1 = mid
    return 0.5 * (t0 + t1)


def push_point(line: CandidateLine, frustum: ViewFrustum, robot_side=(-1.0, 0.0),
               k: Optional[CameraIntrinsics] = None) -> np.ndarray:
    """Contact point on the pushing line.

    Where the segment crosses the frustum surface, the crossing whose image
    position lies farthest toward ``robot_side``; otherwise the point closest
    to the frustum.
    """
    seg = line.segment
    ts = np.linspace(0.0, 1.0, LINE_SAMPLES)
    inside = inside_frustum(_point_at(seg, ts), frustum)
    flips = np.nonzero(inside[1:] != inside[:-1])[0]
    if flips.size:
        crossings = [_point_at(seg, _bisect_crossing(seg, frustum, ts[i], ts[i + 1]))
                     for i in flips]
        side = np.asarray(robot_side, dtype=np.float64)
        if k is not None:
            score = [float(unproject(p, k)[:2] @ side) for p in crossings]
        else:
            score = [float(p[:2] / p[2] @ side) for p in crossings]
        return crossings[int(np.argmax(score))]
    if inside.all():
        d = frustum_distance(_point_at(seg, ts), frustum)
        return _point_at(seg, ts[int(np.argmax(d))])
    t, _ = closest_on_segment(seg, frustum)
    return _point_at(seg, t)


def _hull_candidates(pts: np.ndarray) -> np.ndarray:
    """Indices of points that can realise the diameter (hull vertices plus coplanar)."""
    for dim in (3, 2):
        try:
            if dim == 3:
                coords = pts
            else:
                centred = pts - pts.mean(axis=0)
                _, _, vt = np.linalg.svd(centred, full_matrices=False)
                coords = centred @ vt[:2].T
            hull = ConvexHull(coords, qhull_options="Qc")
            idx = set(hull.vertices.tolist())
            if len(hull.coplanar):
                idx.update(hull.coplanar[:, 0].tolist())
            return np.array(sorted(idx))
        except (QhullError, ValueError):
            continue
    return np.arange(len(pts))


def diameter(pts: np.ndarray) -> float:
    """Largest pairwise Euclidean distance of an ``(n, 3)`` point set."""
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    sub = pts[_hull_candidates(pts)] if len(pts) > 4 else pts
    return float(pdist(sub).max())


def visible_points(visible_mask: np.ndarray, box: RoiBox, depth: np.ndarray,
                   k: CameraIntrinsics) -> np.ndarray:
    rows, cols = np.nonzero(np.asarray(visible_mask, dtype=bool))
    u = cols + box.u_tl
    v = rows + box.v_tl
    z = np.asarray(depth, dtype=np.float64)[v, u]
    ok = z > 0
    return project(np.stack([u[ok], v[ok], z[ok]], axis=-1).astype(np.float64), k)


def push_magnitude(visible_mask: np.ndarray, box: RoiBox, depth: np.ndarray,
                   k: CameraIntrinsics) -> float:
    """Largest 3D distance between back-projected visible fruit pixels."""
    pts = visible_points(visible_mask, box, depth, k)
    if len(pts) == 0:
        raise EmptyMask("no visible fruit pixel with depth")
    return diameter(pts)


@dataclass(frozen=True)
class PushPlan:
    line: Segment3D
    push_point: np.ndarray
    direction_img: np.ndarray
    direction_3d: np.ndarray
    magnitude: float
    ee_orientation: np.ndarray  # quaternion (x, y, z, w)
    gamma: float = 0.0

    def to_dict(self) -> dict:
        return {
            "line": {"p1": self.line.p1.tolist(), "p2": self.line.p2.tolist()},
            "push_point": self.push_point.tolist(),
            "direction_img": self.direction_img.tolist(),
            "direction_3d": self.direction_3d.tolist(),
            "magnitude": self.magnitude,
            "ee_orientation_xyzw": self.ee_orientation.tolist(),
            "gamma": self.gamma,
        }


def lift_direction(o_f) -> np.ndarray:
    d = np.array([o_f[0], o_f[1], 0.0], dtype=np.float64)
    return d / np.linalg.norm(d)


def tool_axis(robot_side=(-1.0, 0.0)) -> np.ndarray:
    """Tool approach axis: the optical axis tilted by pi/4, leaning away from the robot side."""
    s = lift_direction(robot_side)
    return math.cos(EE_TILT) * Z_AXIS - math.sin(EE_TILT) * s


def ee_orientation(robot_side=(-1.0, 0.0)) -> np.ndarray:
    return Rotation.from_matrix(align_to_axis(Z_AXIS, tool_axis(robot_side))).as_quat()


def build_push_plan(line: CandidateLine, point, o_f, magnitude: float,
                    robot_side=(-1.0, 0.0)) -> PushPlan:
    o_f = np.asarray(o_f, dtype=np.float64)
    return PushPlan(
        line=line.segment,
        push_point=np.asarray(point, dtype=np.float64),
        direction_img=o_f / np.linalg.norm(o_f),
        direction_3d=lift_direction(o_f),
        magnitude=float(magnitude),
        ee_orientation=ee_orientation(robot_side),
        gamma=line.gamma,
    )
