import functools
import math

import pytest

from mskernel import assemble_system, assemble_thresholded, build_grid_hierarchy

ACCEPTANCE_LINES = []


@functools.lru_cache(maxsize=None)
def grid_hierarchy(L):
    return build_grid_hierarchy(L)


@functools.lru_cache(maxsize=None)
def grid_system(L):
    return assemble_system(grid_hierarchy(L))


@functools.lru_cache(maxsize=None)
def full_coupling(L, tol=1e-10):
    return assemble_thresholded(grid_system(L), math.inf, tol)


@pytest.fixture
def system3():
    return grid_system(3)


def record(criterion, ok, detail=""):
    """Log an acceptance verdict; the summary is printed at the end of the run."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
