import numpy as np
import pytest

from patsvd.forward import assemble_system_matrix
from patsvd.geometry import BasisGrid, KaiserBesselParams, MeasurementGeometry
from patsvd.network import set_deterministic
from patsvd.svd import svd_factorize

set_deterministic(1)


@pytest.fixture(scope="session")
def small_grid():
    return BasisGrid(12, KaiserBesselParams.scaled_for(12))


@pytest.fixture(scope="session")
def small_geometry():
    return MeasurementGeometry(detectors=16, times=24, horizon=3.75)


@pytest.fixture(scope="session")
def small_matrix(small_grid, small_geometry):
    return assemble_system_matrix(small_grid, small_geometry)


@pytest.fixture(scope="session")
def small_factors(small_matrix):
    return svd_factorize(small_matrix)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
