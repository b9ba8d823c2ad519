"""Straight branch segments: 2D Hough detection and its lift to 3D.

Lines use ``rho = u cos(theta) + v sin(theta)`` with theta in [0, pi); rho
may be negative.  The 3D lift works one image line at a time: the plane
through the camera centre and the line collects the branch points near it,
those points are rotated so the plane faces the camera, imaged
orthographically, and searched again for lines, which are rotated back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .errors import ConfigError, DegenerateSegment
from .geometry import Z_AXIS, CameraIntrinsics, align_to_axis, project

CORRIDOR_PX = 2.0
REFIT_CORRIDOR_PX = 1.5
MAX_PEAKS = 400
CANVAS_MARGIN = 4


@dataclass(frozen=True)
class HoughParams:
    rho_res: float = 1.0
    theta_res: float = math.radians(1.0)
    threshold: int = 30
    min_length: float = 30.0
    max_gap: float = 5.0
    rho_th: float = 25.0
    theta_th: float = math.pi / 6
    d_plane: float = 0.02
    min_length_3d: float = 0.03

    def __post_init__(self):
        values = asdict(self)
        bad = [k for k, v in values.items() if not v > 0]
        if bad:
            raise ConfigError(f"Hough parameters must be positive: {bad}")
        if not self.theta_th < math.pi / 2:
            raise ConfigError("theta_th must be below pi/2")

    @classmethod
    def from_dict(cls, d: dict) -> "HoughParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hough keys: {sorted(unknown)}")
        try:
            return cls(**{k: float(v) if k != "threshold" else int(v) for k, v in d.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad hough parameters: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Segment2D:
    p1: tuple[float, float]
    p2: tuple[float, float]
    rho: float
    theta: float
    votes: int = 0

    @property
    def length(self) -> float:
        return math.hypot(self.p2[0] - self.p1[0], self.p2[1] - self.p1[1])

    def to_dict(self) -> dict:
        return {"p1": list(self.p1), "p2": list(self.p2), "rho": self.rho,
                "theta": self.theta, "votes": self.votes}


@dataclass(frozen=True)
class Segment3D:
    p1: np.ndarray
    p2: np.ndarray
    votes: int = 0
    plane_normal: Optional[np.ndarray] = field(default=None, compare=False)
    source: Optional[Segment2D] = field(default=None, compare=False)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.p2 - self.p1))

    @property
    def direction(self) -> np.ndarray:
        d = self.p2 - self.p1
        return d / np.linalg.norm(d)

    def sample(self, n: int) -> np.ndarray:
        t = np.linspace(0.0, 1.0, n)[:, None]
        return self.p1[None] * (1 - t) + self.p2[None] * t

    def to_dict(self) -> dict:
        return {"p1": self.p1.tolist(), "p2": self.p2.tolist(), "votes": self.votes}


def _normalize_line(normal: np.ndarray, rho: float) -> tuple[float, float]:
    theta = math.atan2(normal[1], normal[0])
    if theta < 0:
        theta += math.pi
        rho = -rho
    if theta >= math.pi:
        theta -= math.pi
        rho = -rho
    return rho, theta


def _split_runs(s: np.ndarray, max_gap: float) -> list[np.ndarray]:
    """Split sorted positions into index runs whose internal gaps are <= max_gap."""
    if s.size == 0:
        return []
    cuts = np.nonzero(np.diff(s) > max_gap)[0] + 1
    return np.split(np.arange(s.size), cuts)


def _fit_line(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Total least squares line: (centroid, unit direction)."""
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    return c, vt[0]


def _extract_segments(pts: np.ndarray, rho: float, theta: float,
                      params: HoughParams) -> list[tuple[Segment2D, np.ndarray]]:
    """Segments supported by ``pts`` along the line (rho, theta), with the
    indices of the points each one consumed."""
    normal = np.array([math.cos(theta), math.sin(theta)])
    tangent = np.array([-normal[1], normal[0]])
    near = np.nonzero(np.abs(pts @ normal - rho) <= CORRIDOR_PX)[0]
    s = pts[near] @ tangent
    order = np.argsort(s, kind="stable")
    near, s = near[order], s[order]
    taken = np.zeros(len(pts), dtype=bool)
    out = []
    for run in _split_runs(s, params.max_gap):
        if run.size < params.threshold or s[run[-1]] - s[run[0]] < params.min_length:
            continue
        idx = near[run]
        for _ in range(2):
            c, d = _fit_line(pts[idx])
            n = np.array([-d[1], d[0]])
            rel = pts - c
            along = rel @ d
            lo, hi = along[idx].min(), along[idx].max()
            cand = np.nonzero((np.abs(rel @ n) <= REFIT_CORRIDOR_PX)
                              & (along >= lo - params.max_gap)
                              & (along <= hi + params.max_gap) & ~taken)[0]
            if cand.size < 2:
                break
            cand = cand[np.argsort(along[cand], kind="stable")]
            idx = cand[max(_split_runs(along[cand], params.max_gap), key=len)]
        if idx.size < params.threshold:
            continue
        c, d = _fit_line(pts[idx])
        along = (pts[idx] - c) @ d
        if along.max() - along.min() < params.min_length:
            continue
        p1 = c + along.min() * d
        p2 = c + along.max() * d
        n = np.array([-d[1], d[0]])
        r, th = _normalize_line(n, float(n @ c))
        taken[idx] = True
        out.append((Segment2D((float(p1[0]), float(p1[1])), (float(p2[0]), float(p2[1])),
                              r, th, int(idx.size)), idx))
    return out


def _sort_key(seg: Segment2D):
    return (-seg.votes, seg.rho, seg.theta)


def hough_segments_2d(mask: np.ndarray, params: HoughParams = HoughParams()) -> list[Segment2D]:
    """Line segments in a binary image.

    Accumulator peaks are taken greedily; every accepted segment removes its
    pixels' votes before the next peak is searched, so each pixel supports
    at most one segment.  Fully deterministic.
    """
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return []
    pts = np.column_stack([cols, rows]).astype(float)
    h, w = mask.shape
    n_theta = max(int(round(math.pi / params.theta_res)), 1)
    thetas = np.arange(n_theta) * params.theta_res
    cos_t, sin_t = np.cos(thetas), np.sin(thetas)
    offset = int(math.ceil(math.hypot(h, w) / params.rho_res)) + 1
    n_rho = 2 * offset + 1

    def votes(p: np.ndarray) -> np.ndarray:
        r = np.rint((p[:, :1] * cos_t + p[:, 1:] * sin_t) / params.rho_res).astype(np.int64)
        flat = np.arange(n_theta)[None, :] * n_rho + r + offset
        return np.bincount(flat.ravel(), minlength=n_theta * n_rho).reshape(n_theta, n_rho)

    acc = votes(pts)
    alive = np.ones(len(pts), dtype=bool)
    dead = np.zeros_like(acc, dtype=bool)
    segments: list[Segment2D] = []
    for _ in range(MAX_PEAKS):
        # neighbouring rho bins share the votes of a digital line
        smooth = acc.copy()
        smooth[:, 1:] += acc[:, :-1]
        smooth[:, :-1] += acc[:, 1:]
        smooth[dead] = -1
        peak = int(np.argmax(smooth))
        ti, ri = divmod(peak, n_rho)
        if smooth[ti, ri] < params.threshold:
            break
        live_idx = np.nonzero(alive)[0]
        found = _extract_segments(pts[live_idx], (ri - offset) * params.rho_res,
                                  float(thetas[ti]), params)
        if not found:
            dead[ti, max(ri - 1, 0):ri + 2] = True
            continue
        for seg, idx in found:
            used = live_idx[idx]
            acc -= votes(pts[used])
            alive[used] = False
            segments.append(seg)
    return sorted(segments, key=_sort_key)


def _angle_gap(a: float, b: float) -> float:
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def is_similar(a: Segment2D, b: Segment2D, rho_th: float, theta_th: float) -> bool:
    return abs(a.rho - b.rho) < rho_th and _angle_gap(a.theta, b.theta) < theta_th


def remove_similar(lines: list[Segment2D], rho_th: float = 25.0,
                   theta_th: float = math.pi / 6) -> list[Segment2D]:
    """Greedy suppression: strongest line of every similar group survives."""
    kept: list[Segment2D] = []
    for seg in sorted(lines, key=_sort_key):
        if not any(is_similar(seg, k, rho_th, theta_th) for k in kept):
            kept.append(seg)
    return kept


def plane_from_segment(seg: Segment2D, k: CameraIntrinsics) -> np.ndarray:
    """Unit normal of the plane through the camera centre and an image segment."""
    r1 = np.array([seg.p1[0] - k.u0, seg.p1[1] - k.v0, k.f])
    r2 = np.array([seg.p2[0] - k.u0, seg.p2[1] - k.v0, k.f])
    n = np.cross(r1, r2)
    norm = np.linalg.norm(n)
    if norm < 1e-9 * np.linalg.norm(r1) * np.linalg.norm(r2):
        raise DegenerateSegment("segment endpoints give parallel rays")
    return n / norm


def filter_points_by_plane(points: np.ndarray, normal: np.ndarray, d_plane: float) -> np.ndarray:
    """Points within ``d_plane`` of the plane through the origin with unit ``normal``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    return points[np.abs(points @ normal) <= d_plane]


@dataclass
class PlaneView:
    """Branch points of one plane, rotated face-on and rasterized."""

    rotation: np.ndarray  # maps camera frame to the face-on frame
    points: np.ndarray  # rotated points; z is the offset from the plane
    image: np.ndarray
    origin: np.ndarray  # metric (x, y) of canvas pixel (margin, margin)
    scale: float  # pixels per meter

    def to_metric(self, uv) -> np.ndarray:
        return (np.asarray(uv, dtype=float) - CANVAS_MARGIN) / self.scale + self.origin


def face_on_view(points: np.ndarray, normal: np.ndarray, k: CameraIntrinsics) -> PlaneView:
    """Rotate points so the plane normal lies on the optical axis, then image
    the plane orthographically at the focal length's scale."""
    rotation = align_to_axis(normal, Z_AXIS)
    q = points @ rotation.T
    scale = k.f / float(np.median(np.linalg.norm(points, axis=1)))
    lo = q[:, :2].min(axis=0)
    span = q[:, :2].max(axis=0) - lo
    limit = 4 * max(k.width, k.height)
    if span.max() * scale > limit:
        scale = limit / span.max()
    size = np.ceil(span * scale).astype(int) + 2 * CANVAS_MARGIN + 1
    img = np.zeros((size[1], size[0]), dtype=bool)
    px = np.rint((q[:, :2] - lo) * scale + CANVAS_MARGIN).astype(int)
    img[px[:, 1], px[:, 0]] = True
    return PlaneView(rotation, q, img, lo, scale)


def _lift_segment(seg: Segment2D, view: PlaneView, params: HoughParams) -> Optional[tuple]:
    a = view.to_metric(seg.p1)
    b = view.to_metric(seg.p2)
    d = b - a
    length = np.linalg.norm(d)
    if length == 0:
        return None
    d /= length
    n = np.array([-d[1], d[0]])
    rel = view.points[:, :2] - a
    along = rel @ d
    near = np.abs(rel @ n) <= params.d_plane
    gap = params.max_gap / view.scale
    idx = np.nonzero(near & (along >= -gap) & (along <= length + gap))[0]
    if idx.size == 0:
        return None
    # grow the support interval outwards while point gaps stay small
    cand = np.nonzero(near)[0]
    s = np.sort(along[cand])
    lo, hi = along[idx].min(), along[idx].max()
    below = s[s < lo][::-1]
    for x in below:
        if lo - x > gap:
            break
        lo = x
    for x in s[s > hi]:
        if x - hi > gap:
            break
        hi = x
    ends = []
    for t in (lo, hi):
        xy = a + t * d
        nearest = int(np.argmin(np.sum((view.points[:, :2] - xy) ** 2, axis=1)))
        ends.append(np.array([xy[0], xy[1], view.points[nearest, 2]]) @ view.rotation)
    return ends[0], ends[1]


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-18), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def _drop_duplicates(segments: list[Segment3D], tol: float,
                     max_angle: float = math.radians(10.0)) -> list[Segment3D]:
    kept: list[Segment3D] = []
    for seg in segments:
        samples = seg.sample(11)
        dup = False
        for other in kept:
            if abs(float(seg.direction @ other.direction)) < math.cos(max_angle):
                continue
            close = _point_segment_distance(samples, other.p1, other.p2) <= tol
            if close.mean() >= 0.8:
                dup = True
                break
        if not dup:
            kept.append(seg)
    return kept


def branch_points(branch_mask: np.ndarray, depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    valid = np.asarray(branch_mask, dtype=bool) & (np.asarray(depth) > 0)
    rows, cols = np.nonzero(valid)
    return project(np.column_stack([cols, rows, depth[rows, cols]]), k)


def detect_lines_3d(branch_mask: np.ndarray, depth: np.ndarray, k: CameraIntrinsics,
                    params: HoughParams = HoughParams(),
                    debug_dir: Optional[Path] = None) -> list[Segment3D]:
    """3D branch segments in the camera frame from a branch mask and depth."""
    depth = np.asarray(depth, dtype=float)
    valid = np.asarray(branch_mask, dtype=bool) & (depth > 0)
    if not valid.any():
        return []
    cloud = branch_points(valid, depth, k)
    lines_2d = remove_similar(hough_segments_2d(skeletonize(valid), params),
                              params.rho_th, params.theta_th)
    found: list[tuple[tuple, Segment3D]] = []
    for i, line in enumerate(lines_2d):
        try:
            normal = plane_from_segment(line, k)
        except DegenerateSegment:
            continue
        in_plane = filter_points_by_plane(cloud, normal, params.d_plane)
        if len(in_plane) < params.threshold:
            continue
        view = face_on_view(in_plane, normal, k)
        img = ndimage.binary_closing(view.image, structure=np.ones((3, 3), dtype=bool))
        img |= view.image
        if debug_dir is not None:
            from .io import write_rgb_png
            write_rgb_png(Path(debug_dir) / f"plane_{i:02d}.png",
                          np.repeat(img[..., None].astype(np.uint8) * 255, 3, axis=2))
        inner = remove_similar(hough_segments_2d(skeletonize(img), params),
                               params.rho_th, params.theta_th)
        for seg in inner:
            ends = _lift_segment(seg, view, params)
            if ends is None:
                continue
            p1, p2 = ends
            if p1[2] <= 0 or p2[2] <= 0 or np.linalg.norm(p2 - p1) < params.min_length_3d:
                continue
            found.append((_sort_key(line) + _sort_key(seg),
                          Segment3D(p1, p2, seg.votes, normal, line)))
    found.sort(key=lambda item: (-item[1].votes,) + item[0])
    return _drop_duplicates([s for _, s in found], 2 * params.d_plane)
