import numpy as np
import pytest

from s2il import tensor as T


@pytest.fixture(autouse=True)
def _float64_default():
    # training helpers switch the global dtype; every test starts from doubles
    T.set_default_dtype("float64")
    yield
    T.set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def log(number, passed: bool, detail: str) -> str:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        _CRITERIA.append(line)
        print(line)
        return line

    return log


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
