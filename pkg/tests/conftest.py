import sys

import numpy as np
import pytest

from pulsekit.frontend import SAMPLE_RATE, AudioClip


def click_track(bpm: float, duration: float = 20.0, offset: float = 0.25, click_ms: float = 5.0):
    """Unit clicks at ``offset + k * 60 / bpm``; returns (clip, click_times)."""
    n = int(round(duration * SAMPLE_RATE))
    x = np.zeros(n)
    times = np.arange(offset, duration, 60.0 / bpm)
    width = int(click_ms * SAMPLE_RATE / 1000)
    for t in times:
        s = int(round(t * SAMPLE_RATE))
        x[s:s + width] = 1.0
    return AudioClip(x, SAMPLE_RATE, f"click_{bpm:g}"), times


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None:
        return
    seen = {}
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = rep.nodeid.rsplit("::", 1)[-1]
            if name.startswith("test_criterion_"):
                seen[int(name.split("_")[2])] = outcome
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(seen):
        line = module.RESULTS.get(n)
        if line is None:
            line = f"CRITERION {n} {'SKIP' if seen[n] == 'skipped' else 'FAIL'}: " \
                   f"{'not run' if seen[n] == 'skipped' else 'raised before reporting'}"
        terminalreporter.write_line(line)
