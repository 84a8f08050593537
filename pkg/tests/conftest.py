import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest


@pytest.fixture(scope="session")
def phantom_run():
    """The scaled-down network trained once on the 100-per-class phantom corpus (seed 7)."""
    import time

    from slicenet import experiments

    start = time.process_time()
    run = experiments.phantom_learning(seed=7)
    run.cpu_seconds = time.process_time() - start
    return run


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
