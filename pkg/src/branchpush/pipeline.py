"""End-to-end pipeline: segment, complete, assess, detect lines, decide."""

from __future__ import annotations

import functools
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import synth
from .completion import (
    CompletedFruit,
    ExternalCompleter,
    OcclusionAssessment,
    assess_occlusion,
    build_completed_fruit,
    complete_analytic,
)
from .decision import (
    DecisionParams,
    ViewFrustum,
    build_push_plan,
    evaluate_lines,
    push_magnitude,
    push_point,
)
from .errors import BranchPushError, ConfigError, DimensionMismatch, EmptyMask, StageError
from .geometry import CameraIntrinsics, unproject
from .hough import HoughParams, Segment3D, detect_lines_3d
from .imaging import (
    DEFAULT_ROI_SIZE,
    HsvRange,
    RoiBox,
    apply_mask,
    binarize,
    crop_roi,
    largest_component,
    segment_hsv,
)

STATUS_PLAN = "PLAN"
STATUS_CLEAR = "CLEAR"
STATUS_NO_CANDIDATE = "NO_CANDIDATE"

_CONFIG_KEYS = {"intrinsics", "fruit_hsv", "branch_hsv", "d_roi", "r_o", "hough",
                "decision", "robot_side", "completer", "seed", "fruit_bridge_px"}


@dataclass(frozen=True)
class PipelineConfig:
    intrinsics: CameraIntrinsics = synth.DEFAULT_INTRINSICS
    fruit_hsv: HsvRange = synth.FRUIT_HSV
    branch_hsv: HsvRange = synth.BRANCH_HSV
    d_roi: int = DEFAULT_ROI_SIZE
    r_o: float = 0.1
    hough: HoughParams = HoughParams()
    decision: DecisionParams = DecisionParams()
    robot_side: tuple[float, float] = (-1.0, 0.0)
    completer: str = "analytic"
    completer_path: Optional[str] = None
    seed: int = 0
    fruit_bridge_px: int = 8

    def __post_init__(self):
        if self.d_roi <= 0:
            raise ConfigError(f"d_roi must be positive, got {self.d_roi}")
        if self.r_o < 0:
            raise ConfigError(f"r_o must be non-negative, got {self.r_o}")
        if self.fruit_bridge_px < 0:
            raise ConfigError("fruit_bridge_px must be non-negative")
        side = np.asarray(self.robot_side, dtype=float)
        if side.shape != (2,) or not np.linalg.norm(side) > 0:
            raise ConfigError(f"robot_side must be a non-zero 2-vector, got {self.robot_side}")
        if self.completer not in ("analytic", "external"):
            raise ConfigError(f"unknown completer {self.completer!r}")
        if self.completer == "external" and not self.completer_path:
            raise ConfigError("external completer needs a path")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            if "intrinsics" in d:
                kw["intrinsics"] = CameraIntrinsics.from_dict(d["intrinsics"])
            for key in ("fruit_hsv", "branch_hsv"):
                if key in d:
                    kw[key] = HsvRange.from_dict(d[key])
            if "hough" in d:
                kw["hough"] = HoughParams.from_dict(d["hough"])
            if "decision" in d:
                kw["decision"] = DecisionParams.from_dict(d["decision"])
            for key, conv in (("d_roi", int), ("r_o", float), ("seed", int),
                              ("fruit_bridge_px", int)):
                if key in d:
                    kw[key] = conv(d[key])
            if "robot_side" in d:
                side = np.asarray(d["robot_side"], dtype=float)
                if side.shape != (2,) or not np.linalg.norm(side) > 0:
                    raise ConfigError(f"robot_side must be a non-zero 2-vector: {d['robot_side']}")
                side = side / np.linalg.norm(side)
                kw["robot_side"] = (float(side[0]), float(side[1]))
            if "completer" in d:
                comp = d["completer"]
                kw["completer"] = comp.get("kind", "analytic")
                kw["completer_path"] = comp.get("path")
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"bad config: {exc}") from exc
        return cls(**kw)

    def to_dict(self) -> dict:
        comp = {"kind": self.completer}
        if self.completer_path:
            comp["path"] = self.completer_path
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "fruit_hsv": self.fruit_hsv.to_dict(),
            "branch_hsv": self.branch_hsv.to_dict(),
            "d_roi": self.d_roi,
            "r_o": self.r_o,
            "hough": self.hough.to_dict(),
            "decision": self.decision.to_dict(),
            "robot_side": list(self.robot_side),
            "completer": comp,
            "seed": self.seed,
            "fruit_bridge_px": self.fruit_bridge_px,
        }

    def make_completer(self):
        if self.completer == "external":
            return ExternalCompleter(self.completer_path)
        return functools.partial(complete_analytic, seed=self.seed)


def default_config() -> PipelineConfig:
    """Configuration matching the synthetic camera and colours."""
    return PipelineConfig()


@dataclass
class PipelineReport:
    status: str
    timings_ms: dict = field(default_factory=dict)
    fruit_mask: Optional[np.ndarray] = None  # ROI-sized visible fruit
    box: Optional[RoiBox] = None
    completed: Optional[CompletedFruit] = None
    assessment: Optional[OcclusionAssessment] = None
    lines: list[Segment3D] = field(default_factory=list)
    candidate_ids: list[int] = field(default_factory=list)
    selected_id: Optional[int] = None
    plan: Optional[object] = None
    reason: Optional[str] = None
    k: Optional[CameraIntrinsics] = None

    @property
    def candidate_count(self) -> int:
        return len(self.candidate_ids)

    def plan_dict(self) -> Optional[dict]:
        return None if self.plan is None else self.plan.to_dict()

    def overlay_data(self) -> dict:
        """Everything the overlay needs, in image pixels."""
        data: dict = {"lines": [], "push_px": None, "arrow": None, "fruit": None}
        k = self.k
        for i, seg in enumerate(self.lines):
            uv = unproject(np.array([seg.p1, seg.p2]), k)[:, :2]
            kind = "filtered"
            if i == self.selected_id:
                kind = "selected"
            elif i in self.candidate_ids:
                kind = "candidate"
            data["lines"].append({"kind": kind, "uv": uv.tolist()})
        if self.fruit_mask is not None and self.box is not None:
            data["fruit"] = {"u_tl": self.box.u_tl, "v_tl": self.box.v_tl,
                             "rows": ["".join("1" if x else "0" for x in row)
                                      for row in self.fruit_mask]}
        if self.completed is not None and self.assessment is not None \
                and self.assessment.view_gradient is not None:
            data["arrow"] = {"from": list(self.completed.centroid_img),
                             "dir": list(self.assessment.view_gradient)}
        if self.plan is not None:
            data["push_px"] = unproject(self.plan.push_point, k)[:2].tolist()
        return data

    def to_dict(self) -> dict:
        out = {
            "status": self.status,
            "timings_ms": self.timings_ms,
            "candidate_count": self.candidate_count,
            "line_count": len(self.lines),
            "selected_line": self.selected_id,
            "reason": self.reason,
            "plan": self.plan_dict(),
            "roi": None if self.box is None else self.box.to_dict(),
            "assessment": None if self.assessment is None else self.assessment.to_dict(),
            "overlay": self.overlay_data(),
        }
        if self.completed is not None:
            out["fruit"] = {"centroid_img": list(self.completed.centroid_img),
                            "centroid_3d": self.completed.centroid_3d.tolist(),
                            "width_px": self.completed.width_px,
                            "height_px": self.completed.height_px}
        return out


@contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except BranchPushError as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = (time.perf_counter() - t0) * 1000.0


def _check_inputs(config: PipelineConfig, rgb: np.ndarray, depth: np.ndarray) -> None:
    h, w = config.intrinsics.shape
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionMismatch(f"RGB image must be (h, w, 3), got {rgb.shape}")
    if rgb.shape[:2] != (h, w) or depth.shape != (h, w):
        raise DimensionMismatch(
            f"images {rgb.shape[:2]} / {depth.shape} do not match intrinsics {(h, w)}")


def assess_scene(config: PipelineConfig, rgb: np.ndarray, depth: np.ndarray,
                 report: Optional[PipelineReport] = None) -> PipelineReport:
    """Segment, complete and assess; the front half of :func:`run_pipeline`."""
    if report is None:
        report = PipelineReport(status=STATUS_CLEAR, k=config.intrinsics)
    timings = report.timings_ms
    with _stage("load", timings):
        _check_inputs(config, rgb, depth)
    with _stage("segment", timings):
        valid = binarize(depth)
        fruit = segment_hsv(rgb, config.fruit_hsv) & valid
        fruit = largest_component(fruit, config.fruit_bridge_px)
        if not fruit.any():
            raise EmptyMask("no fruit pixel in the image")
    with _stage("complete", timings):
        visible_roi, box = crop_roi(apply_mask(depth, fruit), fruit, config.d_roi)
        completed = build_completed_fruit(visible_roi, box, config.intrinsics,
                                          config.make_completer())
    with _stage("assess", timings):
        assessment = assess_occlusion(visible_roi, completed.estimated_depth, config.r_o)
    report.fruit_mask = binarize(visible_roi)
    report.box = box
    report.completed = completed
    report.assessment = assessment
    return report


def run_pipeline(config: PipelineConfig, rgb: np.ndarray, depth: np.ndarray,
                 debug_dir: Optional[Path] = None) -> PipelineReport:
    """Run every stage on one registered RGB-D pair.

    Library errors are re-raised as :class:`StageError` tagged with the
    failing stage.  The inputs are never modified.
    """
    rgb = np.asarray(rgb)
    depth = np.asarray(depth, dtype=np.float64)
    k = config.intrinsics
    report = assess_scene(config, rgb, depth)
    if not report.assessment.occluded:
        report.status = STATUS_CLEAR
        return report
    timings = report.timings_ms
    with _stage("lines", timings):
        branch = segment_hsv(rgb, config.branch_hsv) & binarize(depth)
        report.lines = detect_lines_3d(branch, depth, k, config.hough, debug_dir)
    with _stage("decide", timings):
        completed, assessment = report.completed, report.assessment
        frustum = ViewFrustum.from_fruit(completed.centroid_3d, completed.width_px,
                                         completed.height_px, k)
        o_f = assessment.view_gradient
        _, kept = evaluate_lines(report.lines, frustum, o_f, completed.centroid_3d[2], k,
                                 config.decision)
        report.candidate_ids = [c.index for c in kept]
        if not kept:
            report.status = STATUS_NO_CANDIDATE
            report.reason = (f"none of {len(report.lines)} lines is within d_V of the "
                             "frustum and in front of the fruit")
            return report
        best = min(kept, key=lambda c: (abs(c.gamma), c.distance, -c.segment.length, c.index))
        report.selected_id = best.index
        point = push_point(best, frustum, config.robot_side, k)
        magnitude = push_magnitude(report.fruit_mask, report.box, depth, k)
        report.plan = build_push_plan(best, point, o_f, magnitude, config.robot_side)
        report.status = STATUS_PLAN
    return report


# --- batch evaluation ---------------------------------------------------

def _segment_axis_distance(seg: Segment3D, a: np.ndarray, b: np.ndarray) -> float:
    pts = seg.sample(16)
    ab = b - a
    t = np.clip((pts - a) @ ab / (ab @ ab), 0.0, 1.0)
    return float(np.mean(np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)))


def match_branch(seg: Segment3D, axes) -> int:
    """Index of the ground-truth branch axis closest to ``seg``."""
    return int(np.argmin([_segment_axis_distance(seg, a, b) for a, b in axes]))


def evaluate_scene(config: PipelineConfig, seed: int, difficulty: str) -> dict:
    k = config.intrinsics
    spec = synth.random_scene(seed, difficulty, k)
    rgb, depth, gt = synth.render(spec, k)
    row = {"seed": seed, "gt_ratio": gt.occlusion_ratio, "gt_occluder": gt.occluder,
           "status": None, "matched": None, "correct": False, "cleared": False,
           "error": None, "timings_ms": {}}
    try:
        report = run_pipeline(config, rgb, depth)
    except BranchPushError as exc:
        row["status"] = "ERROR"
        row["error"] = str(exc)
        return row
    row["status"] = report.status
    row["timings_ms"] = report.timings_ms
    if report.plan is None:
        return row
    matched = match_branch(report.plan.line, gt.branch_axes)
    row["matched"] = matched
    row["correct"] = matched == gt.occluder
    moved = synth.displace_branch(spec, matched, report.plan.direction_3d * report.plan.magnitude)
    rgb2, depth2, _ = synth.render(moved, k)
    try:
        after = assess_scene(config, rgb2, depth2)
        row["cleared"] = not after.assessment.occluded
    except BranchPushError as exc:
        row["error"] = str(exc)
    return row


def batch_eval(config: PipelineConfig, n: int, difficulty: str = "single_branch",
               seed: int = 0, workers: int = 1) -> dict:
    """Run ``n`` random scenes with seeds ``seed .. seed + n - 1`` and summarise."""
    if n <= 0:
        raise ValueError("n must be positive")
    seeds = list(range(seed, seed + n))
    job = functools.partial(evaluate_scene, config, difficulty=difficulty)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(job, seeds))
    else:
        rows = [job(s) for s in seeds]
    rows.sort(key=lambda r: r["seed"])
    stages = sorted({name for r in rows for name in r["timings_ms"]})
    mean_ms = {name: float(np.mean([r["timings_ms"][name] for r in rows
                                    if name in r["timings_ms"]])) for name in stages}
    statuses: dict = {}
    for r in rows:
        statuses[r["status"]] = statuses.get(r["status"], 0) + 1
    return {
        "n": n,
        "difficulty": difficulty,
        "seed": seed,
        "occluder_accuracy": sum(r["correct"] for r in rows) / n,
        "clearance_rate": sum(r["cleared"] for r in rows) / n,
        "statuses": statuses,
        "mean_timings_ms": mean_ms,
        "scenes": rows,
    }
