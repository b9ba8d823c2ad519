import functools
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from branchpush import synth  # noqa: E402


@functools.lru_cache(maxsize=None)
def rendered(seed: int, difficulty: str = "single_branch"):
    spec = synth.random_scene(seed, difficulty)
    rgb, depth, gt = synth.render(spec)
    rgb.flags.writeable = False
    depth.flags.writeable = False
    return spec, rgb, depth, gt


@pytest.fixture
def k():
    return synth.DEFAULT_INTRINSICS


@pytest.fixture
def scene():
    return rendered


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
