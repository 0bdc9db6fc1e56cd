import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kvpack.model import Model  # noqa: E402


@pytest.fixture(scope="session")
def model():
    return Model()


@pytest.fixture(scope="session")
def np_model():
    return Model(backend="numpy")


@pytest.fixture(scope="session")
def oracle_weights():
    from oracle import reference_weights
    return reference_weights()


# acceptance results, one line per criterion, echoed after the run
CRITERIA: dict[int, str] = {}


def record(n: int, ok: bool, text: str) -> None:
    CRITERIA[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {text}"
    print(CRITERIA[n])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
