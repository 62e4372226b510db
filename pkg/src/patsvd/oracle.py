"""Finite-difference reference solver for the 2D wave equation.

Second-order leapfrog in time with the 5-point Laplacian on a square
``[-L, L]^2`` with zero Dirichlet boundary.  The domain is chosen large enough
that boundary reflections cannot reach any detector before the last recorded
time, so no absorbing layer is needed.  The solver shares no code with the
analytic forward model; it only uses the blob definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numba
import numpy as np

from .geometry import BasisGrid, KaiserBesselParams, MeasurementGeometry, kaiser_bessel_radial

MAX_CFL = 1.0 / math.sqrt(2.0)


class CflError(ValueError):
    pass


class BoundaryError(ValueError):
    pass


@dataclass(frozen=True)
class FdConfig:
    spacing: float
    time_step: float
    half_width: float

    @property
    def cfl(self) -> float:
        return self.time_step / self.spacing

    @property
    def cells(self) -> int:
        """Nodes run from ``-cells * h`` to ``cells * h``."""
        return int(math.ceil(self.half_width / self.spacing - 1e-9))

    @property
    def axis(self) -> np.ndarray:
        return self.spacing * np.arange(-self.cells, self.cells + 1)

    def validate(self):
        if self.cfl > MAX_CFL * (1 + 1e-12):
            raise CflError(f"CFL ratio {self.cfl:.4f} exceeds the 2D stability limit {MAX_CFL:.4f}")

    def refined(self) -> "FdConfig":
        return replace(self, spacing=self.spacing / 2, time_step=self.time_step / 2)

    @classmethod
    def for_problem(cls, kb: KaiserBesselParams, geom: MeasurementGeometry,
                    cells_per_radius: int = 16, cfl: float = 0.7, source_extent: float = 1.0,
                    margin: float = 0.05) -> "FdConfig":
        """Resolution tied to the blob radius; time step divides the sampling step.

        ``half_width`` is the smallest value for which a reflection off any side
        arrives after the horizon:  the reflected path from a source inside
        ``[-e, e]^2`` (``e = source_extent + a``) to a detector in ``[-1, 1]^2``
        is at least ``2 L - e - 1`` long.
        """
        h = kb.support_radius / cells_per_radius
        dt = geom.time_step
        k = dt / math.ceil(dt / (cfl * h))
        reach = source_extent + kb.support_radius
        det = float(np.abs(geom.positions).max())
        half = 0.5 * (geom.horizon + reach + det) + margin
        return cls(h, k, half)


@numba.njit(cache=True)
def _leapfrog(u, u_old, c2, i0, i1, j0, j1):
    # overwrites u_old with the next time level on rows i0..i1, cols j0..j1
    for i in range(i0, i1 + 1):
        for j in range(j0, j1 + 1):
            u_old[i, j] = (2.0 * u[i, j] - u_old[i, j]
                           + c2 * (u[i + 1, j] + u[i - 1, j] + u[i, j + 1] + u[i, j - 1]
                                   - 4.0 * u[i, j]))


def _laplacian(u):
    lap = np.zeros_like(u)
    lap[1:-1, 1:-1] = u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2] - 4.0 * u[1:-1, 1:-1]
    return lap


def _energy(u_next, u_prev, u, cfg):
    h, k = cfg.spacing, cfg.time_step
    pt = (u_next - u_prev) / (2.0 * k)
    gx = np.diff(u, axis=0) / h
    gy = np.diff(u, axis=1) / h
    return float(((pt**2).sum() + (gx**2).sum() + (gy**2).sum()) * h * h)


def fd_wave_solve(initial, detectors, times, cfg: FdConfig, energy: bool = False):
    """Traces of ``p_tt = Lap p``, ``p(0) = initial``, ``p_t(0) = 0`` at detector positions.

    Parameters
    ----------
    initial : ndarray, shape (2 * cfg.cells + 1,) * 2
        Initial pressure sampled at the nodes ``cfg.axis x cfg.axis`` (first
        index along x).
    detectors : ndarray, shape (n, 2)
    times : ndarray
        Positive, increasing multiples of ``cfg.time_step``.
    energy : bool
        Also return the discrete energy at every recorded time.

    Returns
    -------
    traces : ndarray, shape (n, len(times))
        Bilinear interpolation of the grid solution at the detectors.
    """
    cfg.validate()
    n = cfg.cells
    h, k = cfg.spacing, cfg.time_step
    u0 = np.array(initial, dtype=float)
    if u0.shape != (2 * n + 1, 2 * n + 1):
        raise ValueError(f"initial data shape {u0.shape} does not match the {2 * n + 1}-node grid")
    detectors = np.atleast_2d(np.asarray(detectors, dtype=float))
    times = np.asarray(times, dtype=float)
    steps = np.rint(times / k).astype(np.int64)
    if (steps < 1).any() or np.abs(steps * k - times).max() > 1e-9 * max(times.max(), 1.0):
        raise ValueError("record times must be positive multiples of the time step")

    nz = np.nonzero(u0)
    det_extent = float(np.abs(detectors).max()) if detectors.size else 0.0
    if nz[0].size:
        src_extent = h * (max(np.abs(nz[0] - n).max(), np.abs(nz[1] - n).max()) + 1)
        arrival = 2 * n * h - src_extent - det_extent
        if arrival <= times.max():
            raise BoundaryError(f"boundary reflections arrive at t={arrival:.3f} before the last "
                                f"record time {times.max():.3f}; enlarge the domain")
        lo0, hi0 = nz[0].min(), nz[0].max()
        lo1, hi1 = nz[1].min(), nz[1].max()
    else:
        lo0 = hi0 = lo1 = hi1 = n
    if det_extent >= n * h - h:
        raise BoundaryError("detectors lie outside the computational domain")

    fx = detectors[:, 0] / h + n
    fy = detectors[:, 1] / h + n
    ix = np.floor(fx).astype(np.int64)
    iy = np.floor(fy).astype(np.int64)
    wx = fx - ix
    wy = fy - iy

    def sample(w):
        return ((1 - wx) * (1 - wy) * w[ix, iy] + wx * (1 - wy) * w[ix + 1, iy]
                + (1 - wx) * wy * w[ix, iy + 1] + wx * wy * w[ix + 1, iy + 1])

    c2 = (k / h) ** 2
    last = 2 * n - 1
    # first step from the Taylor expansion with zero initial velocity
    u_prev = u0
    u = u0 + 0.5 * c2 * _laplacian(u0)
    u[0, :] = u[-1, :] = u[:, 0] = u[:, -1] = 0.0
    # values outside this box are exactly zero; it grows by one node per step
    lo0, lo1 = max(lo0 - 1, 1), max(lo1 - 1, 1)
    hi0, hi1 = min(hi0 + 1, last), min(hi1 + 1, last)

    order = np.argsort(steps, kind="stable")
    traces = np.empty((len(detectors), len(times)))
    energies = np.empty(len(times)) if energy else None
    u_old = u_prev.copy()
    pos = 0
    step = 1
    while pos < len(order):
        lo0, lo1 = max(lo0 - 1, 1), max(lo1 - 1, 1)
        hi0, hi1 = min(hi0 + 1, last), min(hi1 + 1, last)
        while pos < len(order) and steps[order[pos]] == step:
            traces[:, order[pos]] = sample(u)
            if energy:
                u_next = u_old.copy()
                _leapfrog(u, u_next, c2, 1, last, 1, last)
                energies[order[pos]] = _energy(u_next, u_old, u, cfg)
            pos += 1
        if pos == len(order):
            break
        _leapfrog(u, u_old, c2, lo0, hi0, lo1, hi1)
        u, u_old = u_old, u
        step += 1
    return (traces, energies) if energy else traces


def sample_blobs(coefficients, centers, kb: KaiserBesselParams, cfg: FdConfig) -> np.ndarray:
    """Initial pressure ``sum_i x_i phi(r - r_i)`` sampled at the FD nodes."""
    axis = cfg.axis
    n = cfg.cells
    h = cfg.spacing
    a = kb.support_radius
    out = np.zeros((len(axis), len(axis)))
    for x_i, (cx, cy) in zip(coefficients, centers):
        if x_i == 0:
            continue
        i_lo, i_hi = int(math.floor((cx - a) / h)) + n, int(math.ceil((cx + a) / h)) + n
        j_lo, j_hi = int(math.floor((cy - a) / h)) + n, int(math.ceil((cy + a) / h)) + n
        X = axis[i_lo:i_hi + 1, None] - cx
        Y = axis[None, j_lo:j_hi + 1] - cy
        out[i_lo:i_hi + 1, j_lo:j_hi + 1] += x_i * kaiser_bessel_radial(np.hypot(X, Y), kb)
    return out


def _traces_to_vector(traces):
    # rows n * Nt + j
    return traces.reshape(-1)


def oracle_apply(x, grid: BasisGrid, geom: MeasurementGeometry, cfg: FdConfig,
                 richardson: bool = True) -> np.ndarray:
    """FD approximation of ``A x`` in the data layout of the system matrix.

    With ``richardson`` the result is ``(4 p_{h/2} - p_h) / 3`` from two
    leapfrog solves, which cancels the leading ``h^2`` error term.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (grid.count,):
        raise ValueError(f"expected {grid.count} coefficients, got shape {x.shape}")
    centers = grid.centers

    def solve(c):
        f = sample_blobs(x, centers, grid.kb, c)
        return fd_wave_solve(f, geom.positions, geom.time_samples, c)

    coarse = solve(cfg)
    if not richardson:
        return _traces_to_vector(coarse)
    fine = solve(cfg.refined())
    return _traces_to_vector((4.0 * fine - coarse) / 3.0)


def oracle_column(i: int, grid: BasisGrid, geom: MeasurementGeometry, cfg: FdConfig,
                  richardson: bool = True) -> np.ndarray:
    """FD approximation of system-matrix column ``i``."""
    if not 0 <= i < grid.count:
        raise IndexError(f"basis index {i} out of range for {grid.count} functions")
    e = np.zeros(grid.count)
    e[i] = 1.0
    return oracle_apply(e, grid, geom, cfg, richardson)
