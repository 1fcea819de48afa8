import json
from pathlib import Path

import numpy as np
import pytest

from chancecbf.scenario import from_dict, synthesize

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "chancecbf" / "fixtures"


def fixture_path(name: str) -> Path:
    return FIXTURES / f"{name}.json"


def fixture_dict(name: str) -> dict:
    return json.loads(fixture_path(name).read_text())


@pytest.fixture(scope="session")
def eq_scenario():
    return from_dict(fixture_dict("equilibrium_pentagon"))


@pytest.fixture(scope="session")
def path_scenario():
    return from_dict(fixture_dict("path_ring_cell"))


@pytest.fixture(scope="session")
def eq_result(eq_scenario):
    return synthesize(eq_scenario)


@pytest.fixture(scope="session")
def path_result(path_scenario):
    return synthesize(path_scenario)


def random_polygon(rng, n_min=5, n_max=8, radius=(1.0, 3.0)):
    """Supporting halfplanes at random angles around the origin."""
    n = int(rng.integers(n_min, n_max + 1))
    # evenly spread jittered normals positively span the plane, so the set is bounded
    angles = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(-0.3, 0.3, n)
    A = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    b = rng.uniform(*radius, n)
    return A, b


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the lines are printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
