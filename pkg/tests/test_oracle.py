import numpy as np
import pytest

from patsvd.forward import radial_pressure_profile
from patsvd.geometry import BasisGrid, KaiserBesselParams, MeasurementGeometry, kaiser_bessel_radial
from patsvd.oracle import (MAX_CFL, BoundaryError, CflError, FdConfig, fd_wave_solve, oracle_apply,
                           oracle_column, sample_blobs)

KB = KaiserBesselParams(0.2)


def blob_initial(cfg, center=(0.0, 0.0), kb=KB):
    ax = cfg.axis
    return kaiser_bessel_radial(np.hypot(ax[:, None] - center[0], ax[None, :] - center[1]), kb)


def short_config(h=0.02):
    return FdConfig(spacing=h, time_step=0.5 * h, half_width=1.6)


def test_zero_initial_data_gives_zero_traces():
    cfg = short_config()
    f = np.zeros((2 * cfg.cells + 1,) * 2)
    out = fd_wave_solve(f, [[0.5, 0.0], [0.0, 0.5]], cfg.time_step * np.arange(1, 30), cfg)
    assert not out.any()


def test_symmetric_detectors_see_identical_traces():
    cfg = short_config()
    times = cfg.time_step * np.arange(1, 60)
    out = fd_wave_solve(blob_initial(cfg), [[0.5, 0.0], [0.0, 0.5], [-0.5, 0.0]], times, cfg)
    np.testing.assert_allclose(out[0], out[1], atol=1e-12)
    np.testing.assert_allclose(out[0], out[2], atol=1e-12)


def test_cfl_and_boundary_checks():
    with pytest.raises(CflError):
        fd_wave_solve(np.zeros((3, 3)), [[0, 0]], [1.0], FdConfig(1.0, MAX_CFL * 1.01, 1.0))
    cfg = FdConfig(0.05, 0.025, 1.0)
    with pytest.raises(BoundaryError):
        fd_wave_solve(blob_initial(cfg), [[0.5, 0.0]], [1.5], cfg)
    with pytest.raises(ValueError):
        fd_wave_solve(np.zeros((5, 5)), [[0, 0]], [0.025], cfg)


def test_record_times_must_align_with_steps():
    cfg = short_config()
    with pytest.raises(ValueError):
        fd_wave_solve(blob_initial(cfg), [[0.5, 0.0]], [0.0123], cfg)


def test_matches_analytic_profile():
    h = 0.0125
    times = 0.025 * np.arange(12, 40)
    exact = radial_pressure_profile(0.5, KB, times)
    sols = []
    for cfg in (short_config(h), short_config(h / 2)):
        sols.append(fd_wave_solve(blob_initial(cfg), [[0.5, 0.0]], times, cfg)[0])
    assert np.abs(sols[0] - exact).max() < 0.03 * np.abs(exact).max()
    extrapolated = (4 * sols[1] - sols[0]) / 3
    assert np.abs(extrapolated - exact).max() < 2e-3 * np.abs(exact).max()


def test_self_convergence_second_order():
    d, times = 0.5, 0.04 * np.arange(14, 21)
    sols = []
    for h in (0.02, 0.01, 0.005):
        cfg = FdConfig(h, 0.5 * h, 1.5)
        sols.append(fd_wave_solve(blob_initial(cfg), [[d, 0.0]], times, cfg)[0])
    ratio = np.linalg.norm(sols[0] - sols[1]) / np.linalg.norm(sols[1] - sols[2])
    assert 3.5 <= ratio <= 4.5


def test_energy_is_nearly_conserved():
    cfg = short_config(0.02)
    times = cfg.time_step * np.arange(1, 80, 6)
    _, e = fd_wave_solve(blob_initial(cfg), [[0.5, 0.0]], times, cfg, energy=True)
    assert np.ptp(e) <= 0.01 * e.max()


def test_for_problem_half_width_and_steps():
    geom = MeasurementGeometry(8, 12, 1.5)
    cfg = FdConfig.for_problem(KB, geom, cells_per_radius=4)
    assert cfg.spacing == pytest.approx(0.05)
    assert cfg.cfl <= 0.7 + 1e-12
    # the sampling step is an integer multiple of the solver step
    ratio = geom.time_step / cfg.time_step
    assert ratio == pytest.approx(round(ratio))
    assert 2 * cfg.half_width - (1.0 + 0.2) - 1.0 > geom.horizon


@pytest.fixture(scope="module")
def tiny_problem():
    grid = BasisGrid(5, KaiserBesselParams(0.3))
    geom = MeasurementGeometry(6, 10, 1.5)
    return grid, geom, FdConfig.for_problem(grid.kb, geom, cells_per_radius=6)


def test_oracle_linearity(tiny_problem):
    grid, geom, cfg = tiny_problem
    c3 = oracle_column(3, grid, geom, cfg)
    c7 = oracle_column(7, grid, geom, cfg)
    e = np.zeros(grid.count)
    e[[3, 7]] = 1.0
    both = oracle_apply(e, grid, geom, cfg)
    np.testing.assert_allclose(both, c3 + c7, atol=1e-13)


def test_oracle_column_causality(tiny_problem):
    grid, geom, cfg = tiny_problem
    col = geom.as_traces(oracle_column(12, grid, geom, cfg, richardson=False))
    d = np.linalg.norm(geom.positions - grid.centers[12], axis=1)
    early = geom.time_samples[None, :] < d[:, None] - grid.kb.support_radius - 2 * cfg.spacing
    assert np.abs(col[early]).max() <= 1e-3 * np.abs(col).max()


def test_oracle_column_index_checked(tiny_problem):
    grid, geom, cfg = tiny_problem
    with pytest.raises(IndexError):
        oracle_column(grid.count, grid, geom, cfg)
    with pytest.raises(ValueError):
        oracle_apply(np.ones(3), grid, geom, cfg)


def test_sample_blobs_superposes(tiny_problem):
    grid, _, cfg = tiny_problem
    x = np.zeros(grid.count)
    x[[0, 12]] = [2.0, -1.0]
    f = sample_blobs(x, grid.centers, grid.kb, cfg)
    ax = cfg.axis
    ref = sum(x[i] * kaiser_bessel_radial(np.hypot(ax[:, None] - grid.centers[i, 0],
                                                   ax[None, :] - grid.centers[i, 1]), grid.kb)
              for i in (0, 12))
    np.testing.assert_allclose(f, ref, atol=1e-15)
