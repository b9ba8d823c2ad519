"""Fruit shape completion and occlusion assessment.

The completer slot takes the ROI depth image of the visible fruit and
returns an estimate of the complete fruit in the same ROI.  The built-in
completer fits an ellipse to the visible silhouette; an external completer
reads a pre-computed estimate from disk so that a learned model can be
plugged in offline.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import ConvexHull, QhullError
from skimage.measure import find_contours

from .errors import (
    DimensionMismatch,
    EmptyVisibleMask,
    FitDegenerate,
    InsufficientSupport,
    NoDepthAtCentroid,
)
from .geometry import CameraIntrinsics, project
from .imaging import RoiBox, binarize, centroid, extent, reinsert

MIN_SUPPORT = 20
DEFAULT_OCCLUSION_RATIO = 0.1
CENTROID_SEARCH_PX = 3


class FruitCompleter(Protocol):
    def __call__(self, visible_roi: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class Ellipse:
    """Conic ``A x^2 + B xy + C y^2 + D x + E y + F = 0`` in pixel coordinates."""

    coeffs: np.ndarray
    center: tuple[float, float]
    axes: tuple[float, float]  # semi-axes, major first
    angle: float  # radians, direction of the major axis

    def evaluate(self, u, v):
        A, B, C, D, E, F = self.coeffs
        return A * u * u + B * u * v + C * v * v + D * u + E * v + F

    def sampson(self, u, v):
        A, B, C, D, E, F = self.coeffs
        gu = 2 * A * u + B * v + D
        gv = B * u + 2 * C * v + E
        return np.abs(self.evaluate(u, v)) / np.maximum(np.hypot(gu, gv), 1e-12)

    def rasterize(self, shape) -> np.ndarray:
        vv, uu = np.mgrid[0:shape[0], 0:shape[1]]
        return self.evaluate(uu.astype(float), vv.astype(float)) <= 0


def _fit_conic_normalized(x: np.ndarray, y: np.ndarray) -> Optional[np.ndarray]:
    # Halir & Flusser's numerically stable form of the direct ellipse fit
    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones_like(x)])
    S1 = D1.T @ D1
    S2 = D1.T @ D2
    S3 = D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError:
        return None
    M = S1 + S2 @ T
    M = np.array([M[2] / 2.0, -M[1], M[0] / 2.0])
    try:
        _, vecs = np.linalg.eig(M)
    except np.linalg.LinAlgError:
        return None
    vecs = np.real(vecs)
    cond = 4 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.nonzero(cond > 0)[0]
    if ok.size == 0:
        return None
    a1 = vecs[:, ok[0]]
    return np.concatenate([a1, T @ a1])


def _conic_to_ellipse(coeffs: np.ndarray) -> Optional[Ellipse]:
    A, B, C, D, E, F = coeffs
    if 4 * A * C - B * B <= 0:
        return None
    xc, yc = np.linalg.solve([[2 * A, B], [B, 2 * C]], [-D, -E])
    f0 = F + 0.5 * (D * xc + E * yc)
    Q = np.array([[A, B / 2], [B / 2, C]])
    lam, vec = np.linalg.eigh(Q)
    if f0 == 0 or np.any(-f0 / lam <= 0):
        return None
    semi = np.sqrt(-f0 / lam)
    major = int(np.argmax(semi))
    angle = float(np.arctan2(vec[1, major], vec[0, major]) % np.pi)
    return Ellipse(
        coeffs=np.asarray(coeffs, dtype=float),
        center=(float(xc), float(yc)),
        axes=(float(semi[major]), float(semi[1 - major])),
        angle=angle,
    )


def fit_ellipse(u, v) -> Optional[Ellipse]:
    """Direct least-squares ellipse fit; None when no ellipse fits."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    mx, my = u.mean(), v.mean()
    s = max(np.sqrt(np.mean((u - mx) ** 2 + (v - my) ** 2)), 1e-9)
    c = _fit_conic_normalized((u - mx) / s, (v - my) / s)
    if c is None:
        return None
    A, B, C, D, E, F = c
    coeffs = np.array([
        A, B, C,
        -2 * A * mx - B * my + D * s,
        -B * mx - 2 * C * my + E * s,
        A * mx * mx + B * mx * my + C * my * my - D * s * mx - E * s * my + F * s * s,
    ])
    coeffs /= np.linalg.norm(coeffs)
    return _conic_to_ellipse(coeffs)


def _contour_points(mask: np.ndarray) -> np.ndarray:
    """Sub-pixel contour (u, v) half-way between fruit and background pixels."""
    h, w = mask.shape
    pts = []
    for contour in find_contours(np.pad(mask, 1).astype(float), 0.5):
        contour = contour[:-1] - 1.0
        on_border = ((contour[:, 0] < -0.25) | (contour[:, 0] > h - 0.75)
                     | (contour[:, 1] < -0.25) | (contour[:, 1] > w - 0.75))
        pts.append(contour[~on_border][:, ::-1])
    return np.concatenate(pts)


def silhouette_support(mask: np.ndarray, hull_tol: float = 0.75,
                       max_turn: float = np.radians(10.0),
                       cut_factor: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Contour samples of ``mask`` and a flag telling which lie on the fruit outline.

    The visible part of a convex fruit keeps its true outline on its convex
    hull.  Contour points away from the hull face an occluder, and a hull run
    that stays straight for longer than a convex outline of this size can is
    an occluder cut; both are excluded.  Points on the crop border are
    dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    pts = _contour_points(mask)
    support = np.ones(len(pts), dtype=bool)
    if len(pts) < 4:
        return pts, support
    try:
        hull = ConvexHull(pts)
    except QhullError:
        return pts, support
    hv = pts[hull.vertices]  # counter-clockwise
    edges = np.roll(hv, -1, axis=0) - hv
    lengths = np.linalg.norm(edges, axis=1)
    heading = np.arctan2(edges[:, 1], edges[:, 0])
    turn = np.abs((np.diff(np.append(heading, heading[0])) + np.pi) % (2 * np.pi) - np.pi)

    # chains of nearly collinear hull edges
    n = len(hv)
    start = int(np.argmax(turn)) + 1  # begin right after a real corner
    chain_id = np.empty(n, dtype=int)
    cid = 0
    for j in range(n):
        e = (start + j) % n
        if j > 0 and turn[(e - 1) % n] > max_turn:
            cid += 1
        chain_id[e] = cid
    chain_len = np.bincount(chain_id, weights=lengths)

    rows, cols = np.nonzero(mask)
    radius = 0.5 * max(np.ptp(rows), np.ptp(cols), 1)
    min_cut = cut_factor * np.sqrt(2.0 * radius)

    # distance of every contour point to every hull edge
    rel = pts[:, None, :] - hv[None, :, :]
    t = np.clip((rel * edges).sum(-1) / np.maximum(lengths ** 2, 1e-12), 0.0, 1.0)
    d = np.linalg.norm(rel - t[..., None] * edges[None], axis=-1)
    nearest = np.argmin(d, axis=1)
    dist = d[np.arange(len(pts)), nearest]
    is_cut = chain_len[chain_id[nearest]] >= min_cut
    corners = hv[turn > max_turn]
    corners = np.vstack([corners, np.roll(hv, -1, axis=0)[turn > max_turn]])
    corner = np.min(np.linalg.norm(pts[:, None, :] - corners[None], axis=-1), axis=1) <= 1.0
    support = (dist <= hull_tol) & (~is_cut | corner)
    return pts, support


def fit_visible_ellipse(visible_roi: np.ndarray, iterations: int = 150,
                        inlier_px: float = 0.6, seed: int = 0) -> Ellipse:
    """Robust ellipse through the visible silhouette of a partially hidden fruit.

    Occluder edges are straight cuts through the fruit: they are kept out
    of the contour support, and a RANSAC search scores each hypothesis by
    its contour inliers minus the visible pixels it would leave outside.
    """
    mask = binarize(visible_roi)
    n_visible = int(mask.sum())
    if n_visible < MIN_SUPPORT:
        raise InsufficientSupport(f"{n_visible} visible pixels, need {MIN_SUPPORT}")
    rows, cols = np.nonzero(mask)
    spread = np.linalg.svd(np.column_stack([cols, rows]) - [cols.mean(), rows.mean()],
                           compute_uv=False)
    if spread[-1] < 1e-9:
        raise FitDegenerate("visible pixels are collinear")

    pts, support = silhouette_support(mask)
    if support.sum() >= 6:
        pts = pts[support]
    pu, pv = pts[:, 0], pts[:, 1]
    vu, vv = cols.astype(float), rows.astype(float)
    max_axis = 2.0 * max(mask.shape)
    rng = np.random.default_rng(seed)

    def score(e: Ellipse) -> tuple[float, np.ndarray]:
        inl = e.sampson(pu, pv) < inlier_px
        outside = (e.evaluate(vu, vv) > 0) & (e.sampson(vu, vv) > inlier_px)
        return float(inl.sum() - 2.0 * outside.sum()), inl

    candidates = [fit_ellipse(pu, pv)]
    for _ in range(iterations):
        idx = rng.choice(len(pts), size=6, replace=False)
        candidates.append(fit_ellipse(pu[idx], pv[idx]))
    best, best_score, best_inl = None, -np.inf, None
    for e in candidates:
        if e is None or e.axes[0] > max_axis or e.axes[1] < 1.0:
            continue
        sc, inl = score(e)
        if sc > best_score:
            best, best_score, best_inl = e, sc, inl
    if best is None:
        raise FitDegenerate("no ellipse hypothesis fits the silhouette")

    for _ in range(3):
        if best_inl.sum() < 6:
            break
        refit = fit_ellipse(pu[best_inl], pv[best_inl])
        if refit is None or refit.axes[0] > max_axis:
            break
        sc, inl = score(refit)
        if sc < best_score:
            break
        best, best_score, best_inl = refit, sc, inl
    if best_inl.sum() >= 6:
        refined = _refine_geometric(best, pu[best_inl], pv[best_inl], vu, vv, inlier_px)
        if refined is not None and refined.axes[0] <= max_axis:
            best = refined
    return best


def ellipse_from_params(cx: float, cy: float, a: float, b: float, angle: float) -> Ellipse:
    c, s = np.cos(angle), np.sin(angle)
    A = (c / a) ** 2 + (s / b) ** 2
    B = 2 * c * s * (1 / a ** 2 - 1 / b ** 2)
    C = (s / a) ** 2 + (c / b) ** 2
    D = -2 * A * cx - B * cy
    E = -B * cx - 2 * C * cy
    F = A * cx * cx + B * cx * cy + C * cy * cy - 1.0
    coeffs = np.array([A, B, C, D, E, F])
    return _conic_to_ellipse(coeffs / np.linalg.norm(coeffs))


def _radial_excess(params, u, v):
    cx, cy, a, b, angle = params
    c, s = np.cos(angle), np.sin(angle)
    x = (u - cx) * c + (v - cy) * s
    y = -(u - cx) * s + (v - cy) * c
    r = np.hypot(x, y)
    rho = np.sqrt((x / a) ** 2 + (y / b) ** 2)
    # signed distance to the outline along the ray from the centre
    return r - r / np.maximum(rho, 1e-12)


def _refine_geometric(e: Ellipse, pu, pv, vu, vv, slack: float) -> Optional[Ellipse]:
    # algebraic fits shrink and flatten on partial arcs; polish geometrically
    x0 = np.array([e.center[0], e.center[1], e.axes[0], e.axes[1], e.angle])

    def residuals(p):
        contour = _radial_excess(p, pu, pv)
        outside = np.maximum(_radial_excess(p, vu, vv) - slack, 0.0)
        return np.concatenate([contour, 2.0 * outside])

    try:
        sol = least_squares(residuals, x0, loss="soft_l1", f_scale=0.5,
                            bounds=([-np.inf, -np.inf, 0.5, 0.5, -np.inf],
                                    [np.inf, np.inf, np.inf, np.inf, np.inf]))
    except ValueError:
        return None
    if not sol.success:
        return None
    cx, cy, a, b, angle = sol.x
    return ellipse_from_params(cx, cy, a, b, angle)


def complete_analytic(visible_roi: np.ndarray, seed: int = 0) -> np.ndarray:
    """Fill the fitted ellipse with the median visible depth."""
    visible_roi = np.asarray(visible_roi, dtype=float)
    e = fit_visible_ellipse(visible_roi, seed=seed)
    mask = binarize(visible_roi)
    filled = e.rasterize(visible_roi.shape) | mask
    return np.where(filled, float(np.median(visible_roi[mask])), 0.0)


class ExternalCompleter:
    """Reads the completed ROI depth (16-bit PNG, millimeters) from ``path``."""

    def __init__(self, path):
        self.path = Path(path)

    def __call__(self, visible_roi: np.ndarray) -> np.ndarray:
        from .io import read_depth_png

        est = read_depth_png(self.path)
        if est.shape != np.shape(visible_roi):
            raise DimensionMismatch(
                f"external estimate {est.shape} vs ROI {np.shape(visible_roi)}")
        return est


@dataclass
class OcclusionAssessment:
    occluded: bool
    ratio: float
    diff_mask: np.ndarray
    diff_centroid: Optional[tuple[float, float]]
    view_gradient: Optional[np.ndarray]

    def to_dict(self) -> dict:
        return {
            "occluded": self.occluded,
            "ratio": self.ratio,
            "diff_area": int(self.diff_mask.sum()),
            "diff_centroid": list(self.diff_centroid) if self.diff_centroid else None,
            "view_gradient": (self.view_gradient.tolist()
                              if self.view_gradient is not None else None),
        }


def assess_occlusion(visible_roi: np.ndarray, estimated_roi: np.ndarray,
                     r_o: float = DEFAULT_OCCLUSION_RATIO) -> OcclusionAssessment:
    visible_roi = np.asarray(visible_roi)
    estimated_roi = np.asarray(estimated_roi)
    if visible_roi.shape != estimated_roi.shape:
        raise DimensionMismatch(f"{visible_roi.shape} vs {estimated_roi.shape}")
    m = binarize(visible_roi)
    m_hat = binarize(estimated_roi)
    area = int(m.sum())
    if area == 0:
        raise EmptyVisibleMask("no visible fruit pixel in the ROI")
    diff = m != m_hat
    ratio = float(diff.sum()) / area
    if not ratio > r_o:
        return OcclusionAssessment(False, ratio, diff, None, None)
    if not m_hat.any():
        raise FitDegenerate("completed fruit estimate is empty")
    cu, cv = centroid(m_hat)
    du, dv = centroid(diff)
    g = np.array([du - cu, dv - cv])
    norm = np.hypot(g[0], g[1])
    if norm == 0:
        raise FitDegenerate("missing region is centred on the fruit; no push direction")
    return OcclusionAssessment(True, ratio, diff, (du, dv), g / norm)


@dataclass
class CompletedFruit:
    estimated_depth: np.ndarray
    centroid_roi: tuple[float, float]
    centroid_img: tuple[float, float]
    centroid_3d: np.ndarray
    width_px: int
    height_px: int


def sample_depth(depth: np.ndarray, u: float, v: float,
                 radius: int = CENTROID_SEARCH_PX) -> float:
    """Depth at the pixel nearest (u, v), else the closest valid one within ``radius``."""
    h, w = depth.shape
    iu, iv = int(round(u)), int(round(v))
    best, best_d2 = None, np.inf
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            x, y = iu + du, iv + dv
            if 0 <= x < w and 0 <= y < h and depth[y, x] > 0:
                d2 = (x - u) ** 2 + (y - v) ** 2
                if d2 < best_d2:
                    best, best_d2 = float(depth[y, x]), d2
    if best is None:
        raise NoDepthAtCentroid(f"no valid depth within {radius} px of ({u:.1f}, {v:.1f})")
    return best


def build_completed_fruit(visible_roi: np.ndarray, box: RoiBox, k: CameraIntrinsics,
                          completer: Callable[[np.ndarray], np.ndarray] = complete_analytic,
                          ) -> CompletedFruit:
    if not binarize(visible_roi).any():
        raise EmptyVisibleMask("no visible fruit pixel in the ROI")
    est = np.asarray(completer(visible_roi), dtype=float)
    if est.shape != np.shape(visible_roi):
        raise DimensionMismatch(f"completer returned {est.shape}")
    cu, cv = centroid(est)
    w_f, h_f = extent(est)
    u_img, v_img = reinsert((cu, cv), box)
    z = sample_depth(est, cu, cv)
    p_c = project([u_img, v_img, z], k)
    return CompletedFruit(est, (cu, cv), (u_img, v_img), p_c, w_f, h_f)
