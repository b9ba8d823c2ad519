"""Command line entry point.

Subcommands::

    branchpush run      --config C --rgb R --depth D --out DIR
    branchpush synth    --seed N --difficulty single_branch --out DIR
    branchpush eval     --config C --n 100 --difficulty multi_branch --seed 0 --out DIR
    branchpush overlay  --rgb R --report DIR/report.json --out DIR

Exit codes: 0 plan or clear, 2 no candidate line, 3 input or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import synth
from .errors import BranchPushError, ConfigError
from .io import read_depth_png, read_json, read_rgb_png, write_depth_png, write_json, write_rgb_png
from .overlay import render_overlay
from .pipeline import STATUS_NO_CANDIDATE, PipelineConfig, batch_eval, default_config, run_pipeline

EXIT_OK = 0
EXIT_NO_CANDIDATE = 2
EXIT_INPUT = 3

log = logging.getLogger("branchpush")


class _Parser(argparse.ArgumentParser):
    # usage errors share the input-error exit code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        return default_config()
    try:
        return PipelineConfig.from_dict(read_json(path))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _load_images(rgb_path: str, depth_path: str):
    try:
        rgb = read_rgb_png(rgb_path)
    except (OSError, ValueError) as exc:
        raise BranchPushError(f"[load] cannot read RGB image {rgb_path}: {exc}") from exc
    try:
        depth = read_depth_png(depth_path)
    except (OSError, ValueError) as exc:
        raise BranchPushError(f"[load] cannot read depth image {depth_path}: {exc}") from exc
    return rgb, depth


def cmd_run(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config = PipelineConfig.from_dict({**config.to_dict(), "seed": args.seed})
    rgb, depth = _load_images(args.rgb, args.depth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_pipeline(config, rgb, depth, debug_dir=out / "planes" if args.debug else None)
    write_json(out / "plan.json", {"status": report.status, "plan": report.plan_dict()})
    write_json(out / "report.json", report.to_dict())
    write_rgb_png(out / "overlay.png", render_overlay(rgb, report))
    log.info("status %s, %d lines, %d candidates", report.status, len(report.lines),
             report.candidate_count)
    print(report.status)
    return EXIT_NO_CANDIDATE if report.status == STATUS_NO_CANDIDATE else EXIT_OK


def cmd_synth(args) -> int:
    config = _load_config(args.config)
    k = config.intrinsics
    seed = config.seed if args.seed is None else args.seed
    spec = synth.random_scene(seed, args.difficulty, k)
    rgb, depth, gt = synth.render(spec, k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rgb_png(out / "rgb.png", rgb)
    write_depth_png(out / "depth.png", depth)
    write_json(out / "ground_truth.json", {"scene": spec.to_dict(), "truth": gt.to_dict()})
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    summary = batch_eval(config, args.n, args.difficulty, seed, workers=args.workers)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "summary.json", summary)
    print(f"scenes:              {summary['n']} ({summary['difficulty']}, seed {summary['seed']})")
    print(f"occluder accuracy:   {100 * summary['occluder_accuracy']:.1f}%")
    print(f"clearance rate:      {100 * summary['clearance_rate']:.1f}%")
    print(f"statuses:            {summary['statuses']}")
    for name, ms in summary["mean_timings_ms"].items():
        print(f"  {name:<10} {ms:8.1f} ms")
    return EXIT_OK


def cmd_overlay(args) -> int:
    try:
        report = read_json(args.report)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from exc
    try:
        rgb = read_rgb_png(args.rgb)
    except (OSError, ValueError) as exc:
        raise BranchPushError(f"[load] cannot read RGB image {args.rgb}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rgb_png(out / "overlay.png", render_overlay(rgb, report))
    return EXIT_OK


def _positive(text: str) -> int:
    n = int(text)
    if n <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="branchpush", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="plan a push for one RGB-D pair")
    run.add_argument("--config")
    run.add_argument("--rgb", required=True)
    run.add_argument("--depth", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--debug", action="store_true", help="write face-on plane images")
    run.set_defaults(func=cmd_run)

    syn = sub.add_parser("synth", help="generate a synthetic scene")
    syn.add_argument("--config")
    syn.add_argument("--out", required=True)
    syn.add_argument("--seed", type=int)
    syn.add_argument("--difficulty", choices=synth.DIFFICULTIES, default="single_branch")
    syn.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="batch evaluation on synthetic scenes")
    ev.add_argument("--config")
    ev.add_argument("--out")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--n", type=_positive, default=100)
    ev.add_argument("--difficulty", choices=synth.DIFFICULTIES, default="single_branch")
    ev.add_argument("--workers", type=_positive, default=1)
    ev.set_defaults(func=cmd_eval)

    ov = sub.add_parser("overlay", help="redraw the overlay from a saved report")
    ov.add_argument("--rgb", required=True)
    ov.add_argument("--report", required=True)
    ov.add_argument("--out", required=True)
    ov.set_defaults(func=cmd_overlay)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BranchPushError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
