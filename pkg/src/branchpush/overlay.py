"""Annotated overlay of a pipeline report on the input image."""

from __future__ import annotations

import numpy as np
from skimage.draw import disk, line

YELLOW = (255, 255, 0)  # detected lines that were filtered out
BLUE = (0, 0, 255)  # lines within d_V of the frustum
GREEN = (0, 255, 0)  # selected pushing line
RED = (255, 0, 0)  # push point and view gradient
TINT = np.array([255, 0, 255], dtype=float)
TINT_ALPHA = 0.4
ARROW_PX = 30.0
POINT_RADIUS = 4


def _draw_line(img: np.ndarray, p, q, color) -> None:
    h, w = img.shape[:2]
    rr, cc = line(int(round(p[1])), int(round(p[0])), int(round(q[1])), int(round(q[0])))
    ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    img[rr[ok], cc[ok]] = color


def _draw_arrow(img: np.ndarray, start, direction, color) -> None:
    start = np.asarray(start, dtype=float)
    d = np.asarray(direction, dtype=float)
    tip = start + ARROW_PX * d
    _draw_line(img, start, tip, color)
    for turn in (0.5, -0.5):
        c, s = np.cos(np.pi + turn), np.sin(np.pi + turn)
        back = np.array([c * d[0] - s * d[1], s * d[0] + c * d[1]])
        _draw_line(img, tip, tip + 0.3 * ARROW_PX * back, color)


def render_overlay(rgb: np.ndarray, report) -> np.ndarray:
    """Draw the fruit tint, lines, view gradient and push point.

    ``report`` is a :class:`~branchpush.pipeline.PipelineReport` or its
    ``to_dict()`` form.  The input image is not modified.
    """
    data = report["overlay"] if isinstance(report, dict) else report.overlay_data()
    out = np.array(rgb, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]

    fruit = data.get("fruit")
    if fruit:
        rows = np.array([[c == "1" for c in row] for row in fruit["rows"]], dtype=bool)
        vv, uu = np.nonzero(rows)
        vv, uu = vv + fruit["v_tl"], uu + fruit["u_tl"]
        ok = (vv < h) & (uu < w)
        px = out[vv[ok], uu[ok]].astype(float)
        out[vv[ok], uu[ok]] = np.rint((1 - TINT_ALPHA) * px + TINT_ALPHA * TINT).astype(np.uint8)

    colors = {"filtered": YELLOW, "candidate": BLUE, "selected": GREEN}
    for kind in ("filtered", "candidate", "selected"):
        for seg in data.get("lines", []):
            if seg["kind"] == kind:
                _draw_line(out, seg["uv"][0], seg["uv"][1], colors[kind])

    if data.get("arrow"):
        _draw_arrow(out, data["arrow"]["from"], data["arrow"]["dir"], RED)
    if data.get("push_px"):
        u, v = data["push_px"]
        rr, cc = disk((v, u), POINT_RADIUS, shape=(h, w))
        out[rr, cc] = RED
    return out
