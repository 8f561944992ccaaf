from pathlib import Path

import pytest

from hmflow.cli import load_config, simulate
from hmflow.radial import make_grid

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"
REGRESSION = ("stationary_q", "blowup_k1", "global_k3", "collision_k2")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def scenario_path(name: str) -> Path:
    return SCENARIO_DIR / f"{name}.cfg"


@pytest.fixture(scope="session")
def grid():
    return make_grid()


@pytest.fixture(scope="session")
def regression_runs(tmp_path_factory):
    """Simulate and analyze every regression scenario once per session."""
    root = tmp_path_factory.mktemp("regression")
    out = {}
    for name in REGRESSION:
        path = root / name
        summary = simulate(load_config(scenario_path(name)), path)
        out[name] = (path, summary)
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

