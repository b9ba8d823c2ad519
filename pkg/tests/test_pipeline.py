import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest

from branchpush import cli, synth
from branchpush.errors import ConfigError, StageError
from branchpush.hough import Segment3D
from branchpush.io import read_json, write_depth_png, write_json, write_rgb_png
from branchpush.overlay import BLUE, GREEN, RED, YELLOW, render_overlay
from branchpush.pipeline import (
    STATUS_CLEAR,
    STATUS_NO_CANDIDATE,
    STATUS_PLAN,
    PipelineConfig,
    batch_eval,
    default_config,
    match_branch,
    run_pipeline,
)


def _angle(d1, d2):
    c = abs(d1 @ d2) / (np.linalg.norm(d1) * np.linalg.norm(d2))
    return np.degrees(np.arccos(min(c, 1.0)))


def test_unoccluded_scene_is_clear(k):
    spec = replace(synth.random_scene(1), branches=())
    rgb, depth, _ = synth.render(spec, k)
    report = run_pipeline(default_config(), rgb, depth)
    assert report.status == STATUS_CLEAR and report.plan is None


def test_single_branch_plan_matches_occluder(scene):
    _, rgb, depth, gt = scene(0)
    report = run_pipeline(default_config(), rgb, depth)
    assert report.status == STATUS_PLAN
    a, b = gt.branch_axes[gt.occluder]
    line = report.plan.line
    err = min(max(np.linalg.norm(line.p1 - a), np.linalg.norm(line.p2 - b)),
              max(np.linalg.norm(line.p1 - b), np.linalg.norm(line.p2 - a)))
    assert err < 0.02 and _angle(line.p2 - line.p1, b - a) < 5
    assert np.linalg.norm(report.plan.direction_img) == pytest.approx(1.0)
    assert report.plan.magnitude > 0
    assert all(t >= 0 for t in report.timings_ms.values())


def test_inputs_not_mutated(scene):
    _, rgb, depth, _ = scene(1)
    rgb, depth = rgb.copy(), depth.copy()
    before = hashlib.sha256(rgb.tobytes() + depth.tobytes()).hexdigest()
    run_pipeline(default_config(), rgb, depth)
    assert hashlib.sha256(rgb.tobytes() + depth.tobytes()).hexdigest() == before


def test_stage_tagged_errors(scene):
    _, rgb, depth, _ = scene(0)
    with pytest.raises(StageError) as info:
        run_pipeline(default_config(), rgb[:10], depth)
    assert info.value.stage == "load"
    with pytest.raises(StageError) as info:
        run_pipeline(default_config(), np.zeros_like(rgb), depth)
    assert info.value.stage == "segment"


def test_no_candidate_when_branches_far(k):
    spec = synth.random_scene(2)
    # the only branch moves far from the fruit; a leaf now hides part of it
    c = spec.fruit.center
    leaf = synth.Leaf(c * 0.8 + [spec.fruit.semi_axes[0] * 0.8, 0, 0], 0.02)
    moved = synth.displace_branch(spec, 0, [0, 0, 3.0])
    moved = replace(moved, leaves=(leaf,), background_depth=8.0)
    rgb, depth, gt = synth.render(moved, k)
    assert gt.occlusion_ratio > 0.1
    report = run_pipeline(default_config(), rgb, depth)
    assert report.status == STATUS_NO_CANDIDATE and report.reason


def test_config_round_trip_and_validation():
    cfg = default_config()
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for bad in ({"d_roi": 0}, {"r_o": -1}, {"robot_side": [0, 0]}, {"mystery": 1},
                {"completer": {"kind": "external"}}, {"hough": {"theta_th": 3.0}},
                {"intrinsics": {"f": 1}}):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict(bad)


def test_config_matches_synthetic_camera():
    cfg = default_config()
    assert cfg.intrinsics == synth.DEFAULT_INTRINSICS
    assert cfg.fruit_hsv == synth.FRUIT_HSV and cfg.branch_hsv == synth.BRANCH_HSV


def test_overlay_colours(scene):
    _, rgb, depth, _ = scene(0)
    report = run_pipeline(default_config(), rgb, depth)
    out = render_overlay(rgb, report)
    assert out.shape == rgb.shape
    data = report.overlay_data()
    sel = [l for l in data["lines"] if l["kind"] == "selected"][0]["uv"]
    # near the first endpoint, away from the arrow and the push point
    for ti in np.linspace(0.05, 0.25, 5):
        u, v = np.rint(np.array(sel[0]) * (1 - ti) + np.array(sel[1]) * ti).astype(int)
        assert tuple(out[v, u]) == GREEN
    pu, pv = np.rint(data["push_px"]).astype(int)
    assert tuple(out[pv, pu]) == RED


def test_overlay_without_candidates(scene):
    spec = replace(synth.random_scene(1), branches=())
    rgb, depth, _ = synth.render(spec)
    report = run_pipeline(default_config(), rgb, depth)
    out = render_overlay(rgb, report)
    changed = np.any(out != rgb, axis=-1)
    assert changed.any()
    assert not np.isin(out.reshape(-1, 3), np.array([YELLOW, BLUE, GREEN, RED])).all(axis=1).any()


def test_overlay_from_saved_report_matches(scene, tmp_path):
    _, rgb, depth, _ = scene(3)
    report = run_pipeline(default_config(), rgb, depth)
    write_json(tmp_path / "r.json", report.to_dict())
    assert np.array_equal(render_overlay(rgb, read_json(tmp_path / "r.json")),
                          render_overlay(rgb, report))


def test_match_branch():
    axes = [(np.zeros(3), np.array([1.0, 0, 0])), (np.array([0, 1.0, 0]), np.array([1.0, 1, 0]))]
    seg = Segment3D(np.array([0.1, 0.9, 0]), np.array([0.8, 1.05, 0]))
    assert match_branch(seg, axes) == 1


def test_batch_eval_deterministic():
    a = batch_eval(default_config(), 1, "single_branch", seed=5)
    b = batch_eval(default_config(), 1, "single_branch", seed=5)
    strip = lambda s: [{k: v for k, v in r.items() if k != "timings_ms"} for r in s["scenes"]]
    assert strip(a) == strip(b)
    assert a["occluder_accuracy"] == b["occluder_accuracy"]
    with pytest.raises(ValueError):
        batch_eval(default_config(), 0)


# --- command line ------------------------------------------------------

@pytest.fixture
def pair(tmp_path):
    assert cli.main(["synth", "--seed", "2", "--out", str(tmp_path / "s")]) == 0
    return tmp_path / "s"


def test_cli_run_and_determinism(pair, tmp_path, capsys):
    args = ["run", "--rgb", str(pair / "rgb.png"), "--depth", str(pair / "depth.png")]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "plan.json").read_bytes()
    assert a == (tmp_path / "b" / "plan.json").read_bytes()
    assert json.loads(a)["status"] == STATUS_PLAN
    for name in ("report.json", "overlay.png"):
        assert (tmp_path / "a" / name).exists()
    truth = read_json(pair / "ground_truth.json")
    assert truth["truth"]["occluder"] == 0


def test_cli_overlay(pair, tmp_path):
    run_dir = tmp_path / "r"
    cli.main(["run", "--rgb", str(pair / "rgb.png"), "--depth", str(pair / "depth.png"),
              "--out", str(run_dir)])
    assert cli.main(["overlay", "--rgb", str(pair / "rgb.png"), "--report",
                     str(run_dir / "report.json"), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "overlay.png").read_bytes() == (run_dir / "overlay.png").read_bytes()


def test_cli_empty_depth_file(pair, tmp_path, capsys):
    empty = tmp_path / "empty.png"
    empty.write_bytes(b"")
    code = cli.main(["run", "--rgb", str(pair / "rgb.png"), "--depth", str(empty),
                     "--out", str(tmp_path / "x")])
    assert code == cli.EXIT_INPUT
    assert "[load]" in capsys.readouterr().err


def test_cli_bad_config(pair, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"d_roi": -3}')
    code = cli.main(["run", "--config", str(cfg), "--rgb", str(pair / "rgb.png"),
                     "--depth", str(pair / "depth.png"), "--out", str(tmp_path / "x")])
    assert code == cli.EXIT_INPUT


def test_cli_no_candidate_exit_code(tmp_path, k):
    spec = synth.random_scene(2)
    leaf = synth.Leaf(spec.fruit.center * 0.8 + [spec.fruit.semi_axes[0] * 0.8, 0, 0], 0.02)
    moved = replace(synth.displace_branch(spec, 0, [0, 0, 3.0]), leaves=(leaf,),
                    background_depth=8.0)
    rgb, depth, _ = synth.render(moved, k)
    write_rgb_png(tmp_path / "rgb.png", rgb)
    write_depth_png(tmp_path / "depth.png", depth)
    code = cli.main(["run", "--rgb", str(tmp_path / "rgb.png"), "--depth",
                     str(tmp_path / "depth.png"), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_NO_CANDIDATE


def test_cli_eval_usage_errors(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["eval", "--n", "0"])
    assert info.value.code == cli.EXIT_INPUT
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == cli.EXIT_INPUT


def test_cli_eval_summary(tmp_path, capsys):
    assert cli.main(["eval", "--n", "1", "--seed", "4", "--out", str(tmp_path)]) == 0
    summary = read_json(tmp_path / "summary.json")
    assert summary["n"] == 1 and "occluder accuracy" in capsys.readouterr().out
