"""Shared lattices and assembled operators.

The fast profile (R=4.5, N=8) is assembled once per session; the standard
profile lives in the acceptance suite.
"""
import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")

from usflow.collision import CollisionOperator, ShearConfig  # noqa: E402
from usflow.expansion import compute_coefficients  # noqa: E402
from usflow.grid import build_grid  # noqa: E402
from usflow.linearized import assemble_L  # noqa: E402

FAST = (4.5, 8)

# (criterion, status, detail) rows filled by the acceptance suite
ACCEPTANCE_REPORT = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in sorted(ACCEPTANCE_REPORT, key=lambda r: _criterion_key(r[0])):
        terminalreporter.write_line(f"criterion {name:4s} {status:4s}  {detail}")


def _criterion_key(name):
    digits = "".join(ch for ch in name if ch.isdigit())
    return int(digits or 0), name


@pytest.fixture
def report():
    """``report(name, ok, detail)`` records one acceptance line and returns ``ok``."""
    def add(name, ok, detail):
        ACCEPTANCE_REPORT.append((name, "PASS" if ok else "FAIL", detail))
        return ok
    return add


@pytest.fixture(scope="session")
def fast_grid():
    return build_grid(*FAST)


@pytest.fixture(scope="session")
def shear_config():
    return ShearConfig(alpha=0.1)


@pytest.fixture(scope="session")
def fast_op(fast_grid, shear_config):
    return CollisionOperator(fast_grid, shear_config)


@pytest.fixture(scope="session")
def fast_cache(fast_op):
    return assemble_L(fast_op)


@pytest.fixture(scope="session")
def fast_coeffs(fast_cache, fast_op, shear_config):
    return compute_coefficients(fast_cache, fast_op, shear_config.A)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
