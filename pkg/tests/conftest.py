import numpy as np
import pytest

from d2dcache import caching

# criterion id -> (title, passed); filled by the acceptance tests
CRITERIA = {}

# statistics of the suite-wide greedy trace check
GREEDY_TRACE = {"runs": 0, "iterations": 0}


def _check_trace(result):
    # every committed gain equals the drop of eta, and eta never increases
    drops = result.etas[:-1] - result.etas[1:]
    assert np.all(np.abs(result.gains - drops) <= 1e-12), "gain differs from eta reduction"
    assert np.all(np.diff(result.etas) <= 0.0), "eta increased during greedy placement"
    GREEDY_TRACE["runs"] += 1
    GREEDY_TRACE["iterations"] += len(result.gains)


@pytest.fixture(autouse=True, scope="session")
def greedy_trace_check():
    caching.add_observer(_check_trace)
    yield GREEDY_TRACE
    caching.remove_observer(_check_trace)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        title, ok = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {title}")
    terminalreporter.write_line(
        f"greedy trace check: {GREEDY_TRACE['runs']} run_caching calls, "
        f"{GREEDY_TRACE['iterations']} placements")
