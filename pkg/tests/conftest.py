import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, cond_floor=0.5):
    a = rng.standard_normal((n, n))
    return a @ a.T + cond_floor * n * np.eye(n)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log
    if not acceptance_log.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(acceptance_log.LINES, key=lambda item: item[0]):
        terminalreporter.write_line(line)
