import numpy as np
import pytest

from embryostage.core import Embryo4D, Frame, StageLabelMap
from embryostage.reference import ReferenceConfig, generate_reference


@pytest.fixture(scope="session")
def small_reference():
    return generate_reference(ReferenceConfig(n_frames=30, n_start=200, n_end=600, radius=150.0, seed=3))


def rigid_embryo(n_points=150, n_frames=12, seed=0, angle=0.02, shift=(0.5, -0.3, 0.2)):
    """Points in a ball rotating about z and drifting; tracks are exact, counts constant."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-100, 100, size=(n_points, 3))
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    frames = [Frame(0, pts)]
    for k in range(1, n_frames):
        new = pts @ rot.T + np.asarray(shift)
        frames.append(Frame(k, new, new - pts))
        pts = new
    return Embryo4D(frames, StageLabelMap(4.7, 10.0, n_frames))


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def _report(number, ok, message):
        line = f"{'PASS' if ok else 'FAIL'} [criterion {number}] {message}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
