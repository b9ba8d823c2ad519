"""PNG and JSON file I/O.  Depth PNGs are 16-bit single channel in millimeters."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

MAX_DEPTH_MM = 65535


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def write_rgb_png(path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(path)


def read_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: depth PNG must be single channel, got shape {arr.shape}")
    return arr.astype(np.float64) / 1000.0


def write_depth_png(path, depth: np.ndarray) -> None:
    mm = np.rint(np.asarray(depth, dtype=np.float64) * 1000.0)
    if mm.min() < 0 or mm.max() > MAX_DEPTH_MM:
        raise ValueError("depth outside the 16-bit millimeter range")
    Image.fromarray(mm.astype(np.uint16)).save(path)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
