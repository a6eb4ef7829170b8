import numpy as np
import pytest

from copulamon.spline_basis import SplineBasisSpec


@pytest.fixture
def spec():
    return SplineBasisSpec()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def record(tag: str, ok, detail: str):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"{tag} {status}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
