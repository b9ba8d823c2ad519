"""Synthetic RGB-D scenes of a fruit and cylindrical branches, with ground truth.

Rendering is flat-shaded ray casting through pixel centres with a depth
buffer, so colour masks and depths are exact.  Lighting changes are emulated
with a global value scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from skimage.color import hsv2rgb

from .errors import PrimitiveBehindCamera, UnknownBranch
from .geometry import CameraIntrinsics, project, unproject
from .imaging import HsvRange

DEFAULT_INTRINSICS = CameraIntrinsics(f=400.0, u0=319.5, v0=239.5, width=640, height=480)

# generator colours sit well inside these ranges
FRUIT_HSV = HsvRange(h_min=10, h_max=50, s_min=0.7, s_max=1.0, v_min=0.5, v_max=1.0)
BRANCH_HSV = HsvRange(h_min=10, h_max=50, s_min=0.25, s_max=0.65, v_min=0.15, v_max=0.5)

BACKGROUND, FRUIT = 0, 1
BRANCH_BASE, LEAF_BASE = 100, 200
DIFFICULTIES = ("single_branch", "multi_branch", "cluttered")


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(3)


@dataclass(frozen=True)
class Fruit:
    center: np.ndarray
    semi_axes: np.ndarray
    hsv: tuple[float, float, float] = (30.0, 0.9, 0.9)


@dataclass(frozen=True)
class Branch:
    p1: np.ndarray
    p2: np.ndarray
    radius: float
    hsv: tuple[float, float, float] = (30.0, 0.45, 0.35)


@dataclass(frozen=True)
class Leaf:
    center: np.ndarray
    radius: float
    hsv: tuple[float, float, float] = (115.0, 0.65, 0.5)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    fruit: Fruit
    branches: tuple[Branch, ...] = ()
    leaves: tuple[Leaf, ...] = ()
    background_depth: float = 3.0
    background_hsv: tuple[float, float, float] = (210.0, 0.25, 0.85)
    light: float = 1.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "fruit": {"center": self.fruit.center.tolist(),
                      "semi_axes": self.fruit.semi_axes.tolist(),
                      "hsv": list(self.fruit.hsv)},
            "branches": [{"p1": b.p1.tolist(), "p2": b.p2.tolist(), "radius": b.radius,
                          "hsv": list(b.hsv)} for b in self.branches],
            "leaves": [{"center": l.center.tolist(), "radius": l.radius, "hsv": list(l.hsv)}
                       for l in self.leaves],
            "background_depth": self.background_depth,
            "background_hsv": list(self.background_hsv),
            "light": self.light,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        fr = d["fruit"]
        return cls(
            seed=int(d["seed"]),
            fruit=Fruit(_vec(fr["center"]), _vec(fr["semi_axes"]), tuple(fr["hsv"])),
            branches=tuple(Branch(_vec(b["p1"]), _vec(b["p2"]), float(b["radius"]),
                                  tuple(b["hsv"])) for b in d.get("branches", [])),
            leaves=tuple(Leaf(_vec(l["center"]), float(l["radius"]), tuple(l["hsv"]))
                         for l in d.get("leaves", [])),
            background_depth=float(d.get("background_depth", 3.0)),
            background_hsv=tuple(d.get("background_hsv", (210.0, 0.25, 0.85))),
            light=float(d.get("light", 1.0)),
        )


@dataclass
class GroundTruth:
    fruit_footprint: np.ndarray  # every pixel whose ray meets the fruit
    fruit_visible: np.ndarray  # pixels where the fruit is the nearest surface
    labels: np.ndarray  # per-pixel id of the nearest surface
    fruit_center: np.ndarray
    fruit_center_px: tuple[float, float]
    branch_axes: list[tuple[np.ndarray, np.ndarray]]
    occluder: Optional[int]
    occlusion_ratio: float
    occluded_by_branch: dict = field(default_factory=dict)

    def branch_mask(self) -> np.ndarray:
        return (self.labels >= BRANCH_BASE) & (self.labels < LEAF_BASE)

    def to_dict(self) -> dict:
        return {
            "fruit_center": self.fruit_center.tolist(),
            "fruit_center_px": list(self.fruit_center_px),
            "fruit_footprint_px": int(self.fruit_footprint.sum()),
            "fruit_visible_px": int(self.fruit_visible.sum()),
            "branch_axes": [[a.tolist(), b.tolist()] for a, b in self.branch_axes],
            "occluder": self.occluder,
            "occlusion_ratio": self.occlusion_ratio,
        }


def hsv_to_rgb8(hsv, light: float = 1.0) -> np.ndarray:
    h, s, v = hsv
    rgb = hsv2rgb(np.array([[[h / 360.0, s, min(v * light, 1.0)]]]))[0, 0]
    return np.rint(rgb * 255).astype(np.uint8)


def _rays(k: CameraIntrinsics, window) -> tuple[np.ndarray, tuple[int, int]]:
    u_lo, v_lo, u_hi, v_hi = window
    vv, uu = np.mgrid[v_lo:v_hi, u_lo:u_hi].astype(np.float64)
    d = np.stack([(uu - k.u0) / k.f, (vv - k.v0) / k.f, np.ones_like(uu)], axis=-1)
    return d.reshape(-1, 3), (v_hi - v_lo, u_hi - u_lo)


def _smaller_positive_root(a, b, c):
    """Smaller positive root of a z^2 + 2 b z + c = 0 per ray, inf where none."""
    with np.errstate(invalid="ignore", divide="ignore"):
        disc = b * b - a * c
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        z1 = (-b - sq) / a
        z2 = (-b + sq) / a
    z = np.where(z1 > 0, z1, np.where(z2 > 0, z2, np.inf))
    return np.where(np.isfinite(z), z, np.inf)


def hit_ellipsoid(d: np.ndarray, center, semi_axes) -> np.ndarray:
    """Depth (z) where rays ``z * d`` first meet an axis-aligned ellipsoid."""
    s = np.asarray(semi_axes, dtype=float)
    c = np.asarray(center, dtype=float)
    ds = d / s
    cs = c / s
    return _smaller_positive_root((ds * ds).sum(1), -(ds @ cs), cs @ cs - 1.0)


def hit_sphere(d: np.ndarray, center, radius: float) -> np.ndarray:
    return hit_ellipsoid(d, center, np.full(3, radius))


def hit_cylinder(d: np.ndarray, p1, p2, radius: float) -> np.ndarray:
    """Depth where rays first meet a capped cylinder between ``p1`` and ``p2``."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    axis = p2 - p1
    length = np.linalg.norm(axis)
    w = axis / length
    e = d - np.outer(d @ w, w)
    g = -p1 + (p1 @ w) * w
    a = (e * e).sum(1)
    b = e @ g
    c = g @ g - radius ** 2
    best = np.full(len(d), np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        disc = b * b - a * c
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        for z in ((-b - sq) / a, (-b + sq) / a):
            t = z * (d @ w) - p1 @ w
            ok = (z > 0) & (t >= 0) & (t <= length)
            best = np.where(ok & (z < best), z, best)
        dw = d @ w
        for cap in (p1, p2):
            z = (cap @ w) / dw
            pt = z[:, None] * d - cap
            ok = (z > 0) & ((pt * pt).sum(1) <= radius ** 2)
            best = np.where(ok & (z < best), z, best)
    return best


def _check_in_front(spec: SceneSpec) -> None:
    f = spec.fruit
    if f.center[2] - f.semi_axes[2] <= 0:
        raise PrimitiveBehindCamera("fruit reaches behind the camera")
    for i, b in enumerate(spec.branches):
        if min(b.p1[2], b.p2[2]) - b.radius <= 0:
            raise PrimitiveBehindCamera(f"branch {i} reaches behind the camera")
    for i, leaf in enumerate(spec.leaves):
        if leaf.center[2] - leaf.radius <= 0:
            raise PrimitiveBehindCamera(f"leaf {i} reaches behind the camera")


def render(spec: SceneSpec, k: CameraIntrinsics = DEFAULT_INTRINSICS,
           window: Optional[tuple[int, int, int, int]] = None):
    """Ray-cast the scene.

    Returns ``(rgb, depth, ground_truth)``; ``window = (u_lo, v_lo, u_hi, v_hi)``
    renders a sub-rectangle only.
    """
    _check_in_front(spec)
    if window is None:
        window = (0, 0, k.width, k.height)
    d, shape = _rays(k, window)

    fruit_z = hit_ellipsoid(d, spec.fruit.center, spec.fruit.semi_axes)
    layers = [(FRUIT, fruit_z, spec.fruit.hsv)]
    for i, b in enumerate(spec.branches):
        layers.append((BRANCH_BASE + i, hit_cylinder(d, b.p1, b.p2, b.radius), b.hsv))
    for j, leaf in enumerate(spec.leaves):
        layers.append((LEAF_BASE + j, hit_sphere(d, leaf.center, leaf.radius), leaf.hsv))

    depth = np.full(len(d), spec.background_depth)
    labels = np.full(len(d), BACKGROUND, dtype=np.int32)
    for label, z, _ in layers:
        nearer = z < depth
        depth = np.where(nearer, z, depth)
        labels = np.where(nearer, label, labels)

    palette = {BACKGROUND: hsv_to_rgb8(spec.background_hsv, spec.light)}
    for label, _, hsv in layers:
        palette[label] = hsv_to_rgb8(hsv, spec.light)
    rgb = np.zeros((len(d), 3), dtype=np.uint8)
    for label, color in palette.items():
        rgb[labels == label] = color

    footprint = np.isfinite(fruit_z)
    visible = labels == FRUIT
    hidden_by = {}
    for label, z, _ in layers[1:]:
        if label >= LEAF_BASE:
            continue
        n = int((footprint & (z < fruit_z)).sum())
        if n:
            hidden_by[label - BRANCH_BASE] = n
    occluder = max(sorted(hidden_by), key=lambda i: hidden_by[i]) if hidden_by else None
    total = int(footprint.sum())
    ratio = 1.0 - visible.sum() / total if total else 0.0

    c = spec.fruit.center
    cu, cv, _ = unproject(c, k)
    gt = GroundTruth(
        fruit_footprint=footprint.reshape(shape),
        fruit_visible=visible.reshape(shape),
        labels=labels.reshape(shape),
        fruit_center=c.copy(),
        fruit_center_px=(float(cu), float(cv)),
        branch_axes=[(b.p1.copy(), b.p2.copy()) for b in spec.branches],
        occluder=occluder,
        occlusion_ratio=float(ratio),
        occluded_by_branch=hidden_by,
    )
    return rgb.reshape(shape + (3,)), depth.reshape(shape), gt


def displace_branch(spec: SceneSpec, branch_id: int, delta) -> SceneSpec:
    if not 0 <= branch_id < len(spec.branches):
        raise UnknownBranch(f"no branch {branch_id} (scene has {len(spec.branches)})")
    delta = _vec(delta)
    b = spec.branches[branch_id]
    moved = replace(b, p1=b.p1 + delta, p2=b.p2 + delta)
    branches = spec.branches[:branch_id] + (moved,) + spec.branches[branch_id + 1:]
    return replace(spec, branches=branches)


# --- random scenes -------------------------------------------------------

def _in_image(points: np.ndarray, k: CameraIntrinsics, margin: float) -> bool:
    uvz = unproject(points, k)
    return bool(np.all((uvz[:, 0] >= margin) & (uvz[:, 0] <= k.width - 1 - margin)
                       & (uvz[:, 1] >= margin) & (uvz[:, 1] <= k.height - 1 - margin)))


def _segment_distance(a0, a1, b0, b1, n: int = 64) -> float:
    t = np.linspace(0, 1, n)[:, None]
    pa = a0 * (1 - t) + a1 * t
    pb = b0 * (1 - t) + b1 * t
    return float(np.min(np.linalg.norm(pa[:, None] - pb[None], axis=-1)))


def fruit_window(spec: SceneSpec, k: CameraIntrinsics, pad: int = 3):
    """Pixel window around the fruit's projected bounding box."""
    c, s = spec.fruit.center, spec.fruit.semi_axes
    # the box around the fruit projects onto the hull of its eight corners
    corners = np.array([[c[0] + sx * s[0], c[1] + sy * s[1], c[2] + sz * s[2]]
                        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    uv = unproject(corners, k)
    u_lo = max(int(np.floor(uv[:, 0].min())) - pad, 0)
    v_lo = max(int(np.floor(uv[:, 1].min())) - pad, 0)
    u_hi = min(int(np.ceil(uv[:, 0].max())) + pad + 1, k.width)
    v_hi = min(int(np.ceil(uv[:, 1].max())) + pad + 1, k.height)
    return u_lo, v_lo, u_hi, v_hi


def occlusion_ratio(spec: SceneSpec, k: CameraIntrinsics = DEFAULT_INTRINSICS) -> tuple[float, Optional[int]]:
    """Ground-truth occlusion ratio and occluder, rendered around the fruit only."""
    _, _, gt = render(spec, k, window=fruit_window(spec, k))
    return gt.occlusion_ratio, gt.occluder


def _random_fruit(rng: np.random.Generator, k: CameraIntrinsics) -> Fruit:
    z = rng.uniform(0.6, 1.2)
    radius = rng.uniform(10.0, 16.0) * z / k.f
    elong = rng.uniform(1.0, 1.15)
    axes = np.array([radius, radius, radius])
    axes[int(rng.integers(2))] *= elong
    u = rng.uniform(140, k.width - 140)
    v = rng.uniform(110, k.height - 110)
    center = project([u, v, z], k)
    hsv = (rng.uniform(20, 40), rng.uniform(0.8, 0.95), rng.uniform(0.75, 0.95))
    return Fruit(center, axes, hsv)


def _branch_colour(rng) -> tuple[float, float, float]:
    return (rng.uniform(20, 40), rng.uniform(0.35, 0.55), rng.uniform(0.25, 0.45))


def _random_occluder(rng, fruit: Fruit, k: CameraIntrinsics) -> Optional[Branch]:
    c = fruit.center
    radius = float(fruit.semi_axes.max())
    front = c[2] - fruit.semi_axes[2]
    z_b = rng.uniform(max(0.35, front - 0.35), front - 0.06)
    r_b = rng.uniform(0.005, 0.01)
    phi = rng.uniform(0, math.pi)
    tilt = rng.uniform(-0.4, 0.4)
    d = np.array([math.cos(phi), math.sin(phi), tilt])
    d /= np.linalg.norm(d)
    # cross the fruit's line of sight at depth z_b, off-centre across the branch
    on_ray = c * (z_b / c[2])
    side = np.array([-math.sin(phi), math.cos(phi), 0.0])
    reach = (radius + r_b) * z_b / c[2]
    offset = rng.uniform(0.15, 0.85) * reach * rng.choice([-1.0, 1.0])
    x = on_ray + offset * side
    length = rng.uniform(0.3, 0.6)
    t = rng.uniform(0.3, 0.7) * length
    p1, p2 = x - t * d, x + (length - t) * d
    if min(p1[2], p2[2]) < 0.25 or not _in_image(np.array([p1, p2]), k, 15):
        return None
    return Branch(p1, p2, r_b, _branch_colour(rng))


def _random_distractor(rng, fruit: Fruit, k: CameraIntrinsics, behind: bool,
                       clearance: float) -> Optional[Branch]:
    c = fruit.center
    depth_r = fruit.semi_axes[2]
    if behind:
        z = rng.uniform(c[2] + depth_r + 0.1, c[2] + 0.6)
        tilt = rng.uniform(-0.15, 0.15)
    else:
        z = rng.uniform(0.4, c[2] - depth_r - 0.05)
        tilt = rng.uniform(-0.3, 0.3)
    u = rng.uniform(60, k.width - 60)
    v = rng.uniform(60, k.height - 60)
    x = project([u, v, z], k)
    phi = rng.uniform(0, math.pi)
    d = np.array([math.cos(phi), math.sin(phi), tilt])
    d /= np.linalg.norm(d)
    length = rng.uniform(0.25, 0.6)
    t = rng.uniform(0.2, 0.8) * length
    p1, p2 = x - t * d, x + (length - t) * d
    if not _in_image(np.array([p1, p2]), k, 5) or min(p1[2], p2[2]) < 0.25:
        return None
    if behind and min(p1[2], p2[2]) < c[2] + depth_r + 0.05:
        return None
    if not behind:
        if max(p1[2], p2[2]) > c[2] - depth_r - 0.03:
            return None
        if _segment_distance(p1, p2, np.zeros(3), c) < clearance:
            return None
    return Branch(p1, p2, rng.uniform(0.005, 0.01), _branch_colour(rng))


def _random_leaf(rng, fruit: Fruit, k: CameraIntrinsics) -> Optional[Leaf]:
    z = rng.uniform(0.4, fruit.center[2] + 0.3)
    u = rng.uniform(40, k.width - 40)
    v = rng.uniform(40, k.height - 40)
    center = project([u, v, z], k)
    r = rng.uniform(0.02, 0.04)
    ray = fruit.center / np.linalg.norm(fruit.center)
    off_axis = np.linalg.norm(center - (center @ ray) * ray)
    if off_axis < fruit.semi_axes.max() * 2.5 + r:
        return None
    return Leaf(center, r, (rng.uniform(100, 130), rng.uniform(0.55, 0.75), rng.uniform(0.4, 0.6)))


def _draw(rng, make, tries: int = 200):
    for _ in range(tries):
        item = make()
        if item is not None:
            return item
    return None


def random_scene(seed: int, difficulty: str = "single_branch",
                 k: CameraIntrinsics = DEFAULT_INTRINSICS) -> SceneSpec:
    """Reproducible random scene; the first branch always partially hides the fruit."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    rng = np.random.default_rng([int(seed), DIFFICULTIES.index(difficulty)])
    for _ in range(500):
        fruit = _random_fruit(rng, k)
        occluder = _draw(rng, lambda: _random_occluder(rng, fruit, k), tries=50)
        if occluder is None:
            continue
        base = SceneSpec(seed=int(seed), fruit=fruit, branches=(occluder,),
                         light=float(rng.uniform(0.85, 1.0)))
        ratio, who = occlusion_ratio(base, k)
        if not (0.1 <= ratio <= 0.5 and who == 0):
            continue
        if difficulty == "single_branch":
            return base
        branches = [occluder]
        leaves = []
        if difficulty == "multi_branch":
            n_extra, clearance = int(rng.integers(1, 4)), 0.2
        else:
            n_extra, clearance = int(rng.integers(2, 5)), 0.1
        for _ in range(n_extra):
            b = _draw(rng, lambda: _random_distractor(rng, fruit, k, bool(rng.random() < 0.5),
                                                      clearance))
            if b is not None:
                branches.append(b)
        if difficulty == "cluttered":
            for _ in range(int(rng.integers(1, 4))):
                leaf = _draw(rng, lambda: _random_leaf(rng, fruit, k))
                if leaf is not None:
                    leaves.append(leaf)
        scene = replace(base, branches=tuple(branches), leaves=tuple(leaves))
        ratio, who = occlusion_ratio(scene, k)
        if 0.1 <= ratio <= 0.5 and who == 0:
            return scene
    raise RuntimeError(f"could not build a {difficulty} scene for seed {seed}")
