"""Acceptance gate: every criterion at its stated tolerance.

Each test records a one-line verdict that is printed in the pytest
terminal summary (and immediately, with ``-s``).
"""

import json
import math
import time

import numpy as np
import pytest

from acceptance_log import record
from branchpush import cli, synth
from branchpush.completion import assess_occlusion, build_completed_fruit
from branchpush.decision import ViewFrustum, frustum_distance, push_magnitude
from branchpush.geometry import align_to_axis, project, unproject
from branchpush.hough import HoughParams, detect_lines_3d, hough_segments_2d, remove_similar
from branchpush.imaging import apply_mask, crop_roi, largest_component, segment_hsv
from branchpush.pipeline import batch_eval, default_config
from oracles import bresenham, cone_inside, line_rho_theta, pairwise_max

K = synth.DEFAULT_INTRINSICS


def _verdict(number, passed, text):
    print("\n" + record(number, passed, text))
    assert passed, text


def _angle_gap(a, b):
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def _visible_roi(rgb, depth):
    fruit = largest_component(segment_hsv(rgb, synth.FRUIT_HSV) & (depth > 0), 8)
    return crop_roi(apply_mask(depth, fruit), fruit)


def test_c01_projection_round_trip():
    rng = np.random.default_rng(101)
    n = 100_000
    uvz = np.column_stack([rng.uniform(0, K.width, n), rng.uniform(0, K.height, n),
                           rng.uniform(0.1, 5.0, n)])
    t0 = time.perf_counter()
    back = unproject(project(uvz, K), K)
    elapsed = time.perf_counter() - t0
    rel = float(np.max(np.linalg.norm(back - uvz, axis=1) / np.linalg.norm(uvz, axis=1)))
    _verdict(1, rel < 1e-9 and elapsed < 1.0,
             f"projection round trip on 1e5 samples: max rel err {rel:.2e} (< 1e-9), "
             f"{elapsed * 1000:.1f} ms (< 1 s)")


def test_c02_rotation_sanity():
    rng = np.random.default_rng(102)
    worst_align, worst_det = 0.0, 0.0
    for _ in range(10_000):
        n, t = rng.normal(size=3), rng.normal(size=3)
        r = align_to_axis(n, t)
        worst_align = max(worst_align, float(np.linalg.norm(r @ (n / np.linalg.norm(n))
                                                            - t / np.linalg.norm(t))))
        worst_det = max(worst_det, abs(float(np.linalg.det(r)) - 1))
    _verdict(2, worst_align < 1e-9 and worst_det < 1e-9,
             f"1e4 align_to_axis calls: max |R n - t| {worst_align:.1e}, "
             f"max |det R - 1| {worst_det:.1e} (both < 1e-9)")


def test_c03_hough_2d_lines():
    rng = np.random.default_rng(103)
    hits = 0
    for _ in range(200):
        while True:
            x0, y0, x1, y1 = (int(a) for a in rng.integers(3, 317, 4))
            y0, y1 = y0 % 237, y1 % 237
            if math.hypot(x1 - x0, y1 - y0) >= 50:
                break
        mask = np.zeros((240, 320), bool)
        for x, y in bresenham(x0, y0, x1, y1):
            mask[y, x] = True
        rho, theta = line_rho_theta(x0, y0, x1, y1)
        for seg in hough_segments_2d(mask):
            same_side = abs(seg.theta - theta) < math.pi / 2
            if abs(seg.rho - (rho if same_side else -rho)) <= 2 and \
                    math.degrees(_angle_gap(seg.theta, theta)) <= 2:
                hits += 1
                break
    _verdict(3, hits >= 196,
             f"2D Hough on 200 random lines: {hits}/200 recovered within (2 px, 2 deg) (>= 98%)")


def test_c04_similar_line_removal():
    rng = np.random.default_rng(104)
    rho_th, theta_th = 25.0, math.pi / 6
    from branchpush.hough import Segment2D

    violations, non_idempotent = 0, 0
    for _ in range(100):
        lines = []
        for _ in range(int(rng.integers(1, 60))):
            rho, theta = rng.uniform(-400, 400), rng.uniform(0, math.pi)
            c, s = math.cos(theta), math.sin(theta)
            lines.append(Segment2D((rho * c, rho * s), (rho * c - 40 * s, rho * s + 40 * c),
                                   rho, theta, int(rng.integers(1, 300))))
        out = remove_similar(lines, rho_th, theta_th)
        for i, a in enumerate(out):
            for b in out[i + 1:]:
                if abs(a.rho - b.rho) < rho_th and _angle_gap(a.theta, b.theta) < theta_th:
                    violations += 1
        non_idempotent += remove_similar(out, rho_th, theta_th) != out
    _verdict(4, violations == 0 and non_idempotent == 0,
             f"similar-line removal on 100 random sets: {violations} similar pairs kept, "
             f"{non_idempotent} non-idempotent sets (both 0)")


def _segment_error(seg, a, b):
    e = min(max(np.linalg.norm(seg.p1 - a), np.linalg.norm(seg.p2 - b)),
            max(np.linalg.norm(seg.p1 - b), np.linalg.norm(seg.p2 - a)))
    cosang = abs(seg.direction @ (b - a)) / np.linalg.norm(b - a)
    return e, math.degrees(math.acos(min(cosang, 1.0)))


def test_c05_hough_3d():
    ok, slowest = 0, 0.0
    for seed in range(100):
        spec = synth.random_scene(seed, "single_branch")
        rgb, depth, gt = synth.render(spec, K)
        mask = segment_hsv(rgb, synth.BRANCH_HSV) & (depth > 0)
        t0 = time.perf_counter()
        segs = detect_lines_3d(mask, depth, K, HoughParams())
        slowest = max(slowest, time.perf_counter() - t0)
        a, b = gt.branch_axes[0]
        errors = [_segment_error(s, a, b) for s in segs]
        ok += any(e < 0.02 and ang < 5 for e, ang in errors)
    _verdict(5, ok >= 95 and slowest < 1.0,
             f"3D Hough on 100 single_branch scenes: {ok}/100 within 2 cm / 5 deg (>= 95), "
             f"slowest {slowest * 1000:.0f} ms (< 1 s)")


def test_c06_analytic_completion():
    good_iou, worst_centroid, n, seed = 0, 0.0, 0, 0
    while n < 100:
        spec = synth.random_scene(seed, "single_branch")
        seed += 1
        rgb, depth, gt = synth.render(spec, K)
        if gt.occlusion_ratio > 0.4:
            continue
        n += 1
        roi, box = _visible_roi(rgb, depth)
        completed = build_completed_fruit(roi, box, K)
        est = completed.estimated_depth > 0
        true = gt.fruit_footprint[box.slices()]
        good_iou += (est & true).sum() / (est | true).sum() >= 0.9
        rows, cols = np.nonzero(true)
        worst_centroid = max(worst_centroid, math.hypot(completed.centroid_roi[0] - cols.mean(),
                                                        completed.centroid_roi[1] - rows.mean()))
    _verdict(6, good_iou >= 95 and worst_centroid <= 2.0,
             f"analytic completion on 100 fruits with ratio <= 0.4: IoU >= 0.9 in {good_iou}/100 "
             f"(>= 95), worst centroid error {worst_centroid:.2f} px (<= 2)")


def test_c07_view_gradient():
    eps = np.finfo(float).eps
    est = np.zeros((56, 56), bool)
    est[16:41, 16:41] = True  # centroid (28, 28)
    cases = {(38, 28): (1.0, 0.0), (18, 28): (-1.0, 0.0), (28, 38): (0.0, 1.0),
             (28, 18): (0.0, -1.0), (38, 38): (math.sqrt(0.5), math.sqrt(0.5))}
    worst = 0.0
    for (du, dv), expected in cases.items():
        vis = est.copy()
        vis[dv - 2:dv + 3, du - 2:du + 3] = False
        a = assess_occlusion(vis * 1.0, est * 1.0, 0.0)
        worst = max(worst, float(np.max(np.abs(a.view_gradient - expected))),
                    abs(float(np.hypot(*a.view_gradient)) - 1.0))
    _verdict(7, worst <= eps,
             f"view gradient on constructed mask pairs: max deviation {worst:.1e} (<= {eps:.1e})")


def test_c08_frustum_sign():
    rng = np.random.default_rng(108)
    disagreements, checked = 0, 0
    for seed in range(20):
        spec = synth.random_scene(seed, "single_branch")
        _, _, gt = synth.render(spec, K, window=synth.fruit_window(spec, K))
        rows, cols = np.nonzero(gt.fruit_footprint)
        fr = ViewFrustum.from_fruit(gt.fruit_center, np.ptp(cols), np.ptp(rows), K)
        c = gt.fruit_center
        lateral = rng.uniform(-0.3, 0.3, (10_000, 3)) * [1, 1, 0]
        pts = lateral + np.outer(rng.uniform(-0.3, 1.5, 10_000), c)
        d = frustum_distance(pts, fr)
        keep = np.abs(d) >= 1e-3
        oracle = cone_inside(pts, c, *fr.semi_axes)
        disagreements += int(np.sum((d <= 0)[keep] != oracle[keep]))
        checked += int(keep.sum())
    _verdict(8, disagreements == 0,
             f"frustum sign vs inequality oracle, 20 scenes x 1e4 points: "
             f"{disagreements} disagreements in {checked} checked (0 allowed)")


def test_c09_push_magnitude():
    mismatches, biggest = 0, 0
    for seed in range(50):
        rgb, depth, _ = synth.render(synth.random_scene(seed, "multi_branch"), K)
        roi, box = _visible_roi(rgb, depth)
        mask = roi > 0
        rows, cols = np.nonzero(mask)
        z = depth[rows + box.v_tl, cols + box.u_tl]
        pts = project(np.column_stack([cols + box.u_tl, rows + box.v_tl, z])[z > 0], K)
        biggest = max(biggest, len(pts))
        mismatches += push_magnitude(mask, box, depth, K) != pairwise_max(pts)
    _verdict(9, mismatches == 0 and biggest <= 2000,
             f"push magnitude on 50 visible-fruit masks (up to {biggest} points): "
             f"{mismatches} differ from the O(n^2) maximum (0 allowed)")


@pytest.fixture(scope="module")
def single_branch_batch():
    return batch_eval(default_config(), 100, "single_branch", seed=0)


def test_c10_occluder_identification():
    summary = batch_eval(default_config(), 100, "multi_branch", seed=0)
    correct = sum(r["correct"] for r in summary["scenes"])
    _verdict(10, correct >= 90,
             f"occluder identification on 100 multi_branch scenes: {correct}/100 (>= 90)")


def test_c11_closed_loop_clearance(single_branch_batch):
    cleared = sum(r["cleared"] for r in single_branch_batch["scenes"])
    _verdict(11, cleared >= 80,
             f"closed-loop clearance on 100 single_branch scenes: {cleared}/100 (>= 80)")


def test_c12_runtime_and_determinism(single_branch_batch, tmp_path):
    slowest = max(sum(r["timings_ms"].values()) for r in single_branch_batch["scenes"])
    assert cli.main(["synth", "--seed", "12", "--out", str(tmp_path / "scene")]) == 0
    plans = []
    for run in ("a", "b"):
        out = tmp_path / run
        t0 = time.perf_counter()
        cli.main(["run", "--rgb", str(tmp_path / "scene" / "rgb.png"),
                  "--depth", str(tmp_path / "scene" / "depth.png"), "--out", str(out)])
        slowest = max(slowest, (time.perf_counter() - t0) * 1000)
        plans.append((out / "plan.json").read_bytes())
    identical = plans[0] == plans[1] and json.loads(plans[0])["plan"] is not None
    _verdict(12, slowest < 2000 and identical,
             f"full pipeline at 640x480: slowest {slowest:.0f} ms (< 2000); "
             f"plan.json byte-identical across runs: {identical}")
