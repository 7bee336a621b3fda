import numpy as np
import pytest

from ptadapt import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the test once per installed kernel backend."""
    previous = kernels.active_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


def block(shape, rows, cols):
    m = np.zeros(shape, dtype=bool)
    m[rows[0]: rows[1] + 1, cols[0]: cols[1] + 1] = True
    return m


# one line per acceptance criterion, echoed in the terminal summary
CRITERIA: list[tuple[int, str]] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(CRITERIA, key=lambda c: c[0]):
            terminalreporter.write_line(line)
