import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ncode", deadline=None, max_examples=30, derandomize=True)
settings.load_profile("ncode")


@pytest.fixture
def tight():
    from ncode.odesolve import SolverConfig

    return SolverConfig(method="dopri5", rtol=1e-10, atol=1e-10)


def central_diff(fn, x, h=1e-6):
    """Central differences of a vector-valued fn, columns over entries of x."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        cols.append((np.asarray(fn(xp)) - np.asarray(fn(xm))).reshape(-1) / (2 * h))
    return np.stack(cols, axis=-1)


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    """Record one acceptance line; printed again in the session summary."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
