import numpy as np
import pytest

from oodaug.pipeline import ExperimentConfig, run_pipeline


@pytest.fixture(scope="session")
def one_round():
    """A default-sized single refinement round: (config, report, artifacts)."""
    cfg = ExperimentConfig(refinement_rounds=1, eval_episodes=20, sampler={"rollout_count": 20})
    report, arts = run_pipeline(cfg, return_artifacts=True)
    return cfg, report, arts


def wall_distance(spec, pos):
    """Euclidean distance from each position to the nearest solid wall point."""
    pos = np.atleast_2d(pos)
    off = np.abs(pos[:, 0] - spec.gap_center)
    half = spec.gap_width / 2
    ex = np.where(off >= half, 0.0, half - off)
    return np.hypot(ex, pos[:, 1] - spec.wall_y)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = {}


def record_criterion(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} :: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
