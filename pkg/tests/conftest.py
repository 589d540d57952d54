import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stochcl.grid import TorusGrid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid64():
    return TorusGrid(1, 64)


def zero_mean_field(grid, rng, modes=4, amplitude=0.5):
    """Random smooth zero-mean field built from a few Fourier modes."""
    coords = grid.coordinates()
    values = np.zeros(grid.shape)
    for n in range(1, modes + 1):
        a, b = rng.normal(size=2) * amplitude / n
        phase = 2 * np.pi * n * coords[0] / grid.period
        if grid.dim == 2:
            phase = phase + 2 * np.pi * rng.integers(-2, 3) * coords[1] / grid.period
        values += a * np.cos(phase) + b * np.sin(phase)
    return values - values.mean()


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Print and record one pass/fail line per acceptance criterion."""

    def _report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
