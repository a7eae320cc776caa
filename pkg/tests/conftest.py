import sys
import warnings
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mkvlab.coeffs import CoefficientSet  # noqa: E402
from mkvlab.sim import SimConfig, simulate  # noqa: E402


def run(cs, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return simulate(SimConfig(**kw), cs)


@pytest.fixture(scope="session")
def bm_small():
    """Brownian particles, n = 20, R = 500, 64 steps on [0, 1]."""
    return run(CoefficientSet.constant(), n=20, replications=500, steps=64, master_seed=7)


@pytest.fixture(scope="session")
def mixed_small():
    """Constant drift with idiosyncratic and common noise, stored increments."""
    cs = CoefficientSet.constant(b=0.3, sigma=1.0, sigma_bar=0.5)
    return run(cs, n=10, replications=100, steps=32, master_seed=3, store_noise=True)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[k])
