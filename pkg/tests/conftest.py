import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_full_rank(rng, d_y, d_x):
    while True:
        A = rng.standard_normal((d_y, d_x))
        s = np.linalg.svd(A, compute_uv=False)
        if s[-1] > 1e-3 * s[0]:
            return A


def random_spd(rng, d, scale=1.0):
    L = rng.standard_normal((d, d))
    return scale * (L @ L.T / d + np.eye(d))


ACCEPTANCE_LINES: dict[int, str] = {}


def report(number, passed, detail):
    """Record the outcome of acceptance criterion ``number``."""
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
