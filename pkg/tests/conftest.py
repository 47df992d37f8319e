import numpy as np
import pytest

from gazecnn import synth as S

TINY_GRID = S.SweepGrid(gaze_pitch=(-10.0, 0.0, 10.0), gaze_yaw=(-20.0, 0.0, 20.0),
                        head=((0.0, 0.0, 0.0), (10.0, -10.0, 0.0)))


def pytest_configure(config):
    np.seterr(over="raise", invalid="raise")


@pytest.fixture(scope="session")
def tiny_samples():
    """6 characters x 18 sweep points, small enough to train on in seconds."""
    return S.render_samples(S.make_characters(6, seed=11), TINY_GRID, seed=0)


@pytest.fixture(scope="session")
def tiny_domains():
    bright = S.render_samples(S.make_characters(4, seed=1, preset="bright"), TINY_GRID, seed=0)
    dim = S.render_samples(S.make_characters(4, seed=1, preset="dim"), TINY_GRID, seed=0)
    return {"bright": bright, "dim": dim}


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_line():
    """Record (and print) one acceptance verdict line."""
    def emit(line: str):
        ACCEPTANCE_LINES.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
