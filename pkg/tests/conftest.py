from __future__ import annotations

import pytest

from mfsmp.adjoint import solve_adjoints
from mfsmp.fixtures import get_fixture
from mfsmp.forward import TimeGrid, simulate


@pytest.fixture(scope="session")
def ex11():
    return get_fixture("example11")


@pytest.fixture(scope="session")
def ex11_run(ex11):
    """Pinned run: N = 1e4, M = 100, seed 42, with both adjoints."""
    grid = TimeGrid(ex11.spec.T, 100)
    ens = simulate(ex11.spec, ex11.candidate, grid, 10_000, 42)
    return ens, solve_adjoints(ex11.spec, ens)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_log(request):
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE_KEY, None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(log):
        passed, detail = log[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
