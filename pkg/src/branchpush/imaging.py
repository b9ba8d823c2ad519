"""Raster helpers: HSV segmentation, mask algebra, ROI crop and centroids.

Images are plain numpy arrays laid out row-major as ``(height, width)``:

* RGB images: ``uint8`` of shape ``(h, w, 3)``
* depth images: ``float64`` meters of shape ``(h, w)``, 0 meaning no return
* bit masks: ``bool`` of shape ``(h, w)``

Pixel coordinates are ``(u, v) = (column, row)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.color import rgb2hsv

from .errors import ConfigError, DimensionMismatch, EmptyImage, EmptyMask, OutOfRoi

DEFAULT_ROI_SIZE = 56


@dataclass(frozen=True)
class HsvRange:
    """Inclusive HSV box; hue in degrees and allowed to wrap (h_min > h_max)."""

    h_min: float
    h_max: float
    s_min: float = 0.0
    s_max: float = 1.0
    v_min: float = 0.0
    v_max: float = 1.0

    def __post_init__(self):
        if not (0 <= self.h_min < 360 and 0 <= self.h_max <= 360):
            raise ConfigError(f"hue bounds out of [0, 360): {self}")
        if self.s_min > self.s_max or self.v_min > self.v_max:
            raise ConfigError(f"empty saturation/value interval: {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "HsvRange":
        try:
            return cls(**{key: float(d[key]) for key in
                          ("h_min", "h_max", "s_min", "s_max", "v_min", "v_max")})
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad HSV range: {exc}") from exc

    def to_dict(self) -> dict:
        return dict(h_min=self.h_min, h_max=self.h_max, s_min=self.s_min,
                    s_max=self.s_max, v_min=self.v_min, v_max=self.v_max)

    def contains(self, h, s, v):
        h = np.asarray(h)
        if self.h_min <= self.h_max:
            hue_ok = (h >= self.h_min) & (h <= self.h_max)
        else:
            hue_ok = (h >= self.h_min) | (h <= self.h_max)
        return (hue_ok & (s >= self.s_min) & (s <= self.s_max)
                & (v >= self.v_min) & (v <= self.v_max))


@dataclass(frozen=True)
class RoiBox:
    """Square crop window; ``u_BR``/``v_BR`` are exclusive."""

    u_tl: int
    v_tl: int
    size: int

    @property
    def u_br(self) -> int:
        return self.u_tl + self.size

    @property
    def v_br(self) -> int:
        return self.v_tl + self.size

    def slices(self) -> tuple[slice, slice]:
        return slice(self.v_tl, self.v_br), slice(self.u_tl, self.u_br)

    def to_dict(self) -> dict:
        return dict(u_tl=self.u_tl, v_tl=self.v_tl, u_br=self.u_br,
                    v_br=self.v_br, d_roi=self.size)

    @classmethod
    def from_dict(cls, d: dict) -> "RoiBox":
        return cls(int(d["u_tl"]), int(d["v_tl"]), int(d["d_roi"]))


def to_hsv(img: np.ndarray) -> np.ndarray:
    """RGB uint8 -> HSV with hue in degrees [0, 360) and S, V in [0, 1]."""
    hsv = rgb2hsv(np.asarray(img, dtype=np.uint8))
    hsv[..., 0] *= 360.0
    return hsv


def segment_hsv(img: np.ndarray, hsv_range: HsvRange) -> np.ndarray:
    hsv = to_hsv(img)
    return hsv_range.contains(hsv[..., 0], hsv[..., 1], hsv[..., 2])


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise DimensionMismatch(f"{a.shape[:2]} vs {b.shape[:2]}")


def apply_mask(depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Hadamard product of depth and mask (zeros where the mask is off)."""
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_same_shape(depth, mask)
    return np.where(mask, depth, 0.0)


def binarize(depth: np.ndarray) -> np.ndarray:
    return np.asarray(depth) > 0


def largest_component(mask: np.ndarray, bridge_px: int = 0) -> np.ndarray:
    """Largest connected component of ``mask``.

    Components closer than ``bridge_px`` pixels are merged first, so a fruit
    split in two by a thin occluder stays a single object.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    grouped = mask
    if bridge_px > 0:
        grouped = ndimage.binary_dilation(mask, iterations=bridge_px)
    labels, n = ndimage.label(grouped)
    if n <= 1:
        return mask.copy()
    counts = np.bincount(labels[mask], minlength=n + 1)
    counts[0] = 0
    return mask & (labels == int(np.argmax(counts)))


def crop_roi(depth: np.ndarray, mask: np.ndarray,
             d_roi: int = DEFAULT_ROI_SIZE) -> tuple[np.ndarray, RoiBox]:
    """Square ``d_roi`` crop centred on the mask's bounding box, kept in-image."""
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_same_shape(depth, mask)
    h, w = mask.shape
    if d_roi > min(h, w):
        raise DimensionMismatch(f"ROI size {d_roi} exceeds image {w}x{h}")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyMask("no fruit pixel to crop around")
    cu = 0.5 * (cols.min() + cols.max())
    cv = 0.5 * (rows.min() + rows.max())
    u_tl = int(np.floor(cu - d_roi / 2 + 0.5))
    v_tl = int(np.floor(cv - d_roi / 2 + 0.5))
    u_tl = min(max(u_tl, 0), w - d_roi)
    v_tl = min(max(v_tl, 0), h - d_roi)
    box = RoiBox(u_tl, v_tl, d_roi)
    return depth[box.slices()].copy(), box


def reinsert(p_roi, box: RoiBox) -> tuple[float, float]:
    """Translate ROI-local pixel coordinates back into the full image."""
    u, v = float(p_roi[0]), float(p_roi[1])
    if not (0 <= u < box.size and 0 <= v < box.size):
        raise OutOfRoi(f"({u}, {v}) outside [0, {box.size})^2")
    return u + box.u_tl, v + box.v_tl


def centroid(depth: np.ndarray) -> tuple[float, float]:
    """Mean (u, v) of pixels with non-zero depth."""
    rows, cols = np.nonzero(np.asarray(depth) != 0)
    if rows.size == 0:
        raise EmptyImage("centroid of an empty image")
    return float(cols.mean()), float(rows.mean())


def extent(depth: np.ndarray) -> tuple[int, int]:
    """(width, height) in pixels spanned by non-zero depth: max - min."""
    rows, cols = np.nonzero(np.asarray(depth) != 0)
    if rows.size == 0:
        raise EmptyImage("extent of an empty image")
    return int(cols.max() - cols.min()), int(rows.max() - rows.min())
