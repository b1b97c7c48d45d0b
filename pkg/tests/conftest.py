import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from noprop.data import find_mnist_dir, synth_blobs

settings.register_profile("default", max_examples=40, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar f at array x, written independently of the package."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
    return grad


@pytest.fixture
def blobs():
    return synth_blobs(100, 2, seed=0), synth_blobs(100, 2, seed=0, split="test")


@pytest.fixture(scope="session")
def mnist_dir():
    root = find_mnist_dir()
    if root is None:
        pytest.skip("MNIST IDX files not available")
    return root


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one verdict line per acceptance criterion; all lines are repeated in the terminal summary."""

    def record(criterion: str, verdict: str, detail: str) -> None:
        line = f"criterion {criterion}: {verdict} ({detail})"
        _ACCEPTANCE.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
