"""Analytic forward model: pressure traces of a single blob and the system matrix.

The pressure generated by a radially symmetric initial source depends only on
the distance to its center, so one radial profile ``p(d, t)`` tabulated on a
distance grid determines every matrix entry through linear interpolation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import iv

from .geometry import BasisGrid, KaiserBesselParams, MeasurementGeometry

log = logging.getLogger(__name__)


class QuadratureError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (estimated residual {residual:.3e})")
        self.residual = residual


class InterpolationError(ValueError):
    def __init__(self, message, bound):
        super().__init__(f"{message} (estimated bound {bound:.3e})")
        self.bound = bound


def _series_coefficients(params: KaiserBesselParams, tol=1e-18):
    """Power-series coefficients of the blob in ``u = 1 - r^2/a^2`` (after the ``u^m`` factor)."""
    m, g = int(params.order), params.taper
    coef = []
    k = 0
    while True:
        c = (g / 2) ** m * (g * g / 4) ** k / (math.factorial(k) * math.factorial(k + m))
        coef.append(c)
        if k > 4 and c < tol:
            break
        k += 1
    return np.array(coef) / iv(m, g)


class _BlobSeries:
    """Fast evaluation of the blob from the squared radius, exact up to round-off."""

    def __init__(self, params: KaiserBesselParams):
        self.a2 = params.support_radius**2
        self.m = int(params.order)
        self.coef = _series_coefficients(params)

    def __call__(self, q2):
        u = np.clip(1.0 - q2 / self.a2, 0.0, None)
        acc = np.full_like(u, self.coef[-1])
        for c in self.coef[-2::-1]:
            acc *= u
            acc += c
        return acc * u**self.m


@dataclass(frozen=True)
class ProfileQuadrature:
    """Node counts for the circular-means integral.

    ``radial_nodes`` Gauss-Legendre nodes in the angle ``theta`` of the
    substitution ``rho = t sin(theta)``; ``arc_nodes`` Gauss-Legendre nodes on
    the arc of the circle that intersects the blob support.
    """

    radial_nodes: int = 48
    radial_panels: int = 2
    arc_nodes: int = 24
    derivative_step: float | None = None

    def step_for(self, params: KaiserBesselParams, time_step: float) -> float:
        if self.derivative_step is not None:
            return self.derivative_step
        # time-derivative stencil refined well below both the sampling step and the blob width
        return min(time_step / 4.0, params.support_radius / 64.0)


def _circle_integral(blob, a, d, rho, nodes, weights):
    """Integral of ``phi(|s + rho w|)`` over the unit circle ``w`` for ``|s| = d``.

    Only the arc inside the support contributes.  By symmetry it is twice the
    integral over ``[0, psi_max]``, done with Gauss-Legendre nodes (the
    integrand vanishes smoothly at ``psi_max``); the unhalved Legendre weights
    supply the factor two.
    """
    prod = d * rho
    with np.errstate(divide="ignore", invalid="ignore"):
        c = (d * d + rho * rho - a * a) / (2.0 * prod)
    c = np.where(prod > 0, c, -1.0)
    psi_max = np.arccos(np.clip(c, -1.0, 1.0))
    psi = 0.5 * psi_max[..., None] * (nodes + 1.0)
    q2 = d[..., None] ** 2 + rho[..., None] ** 2 - 2.0 * prod[..., None] * np.cos(psi)
    arc = psi_max * (blob(np.maximum(q2, 0.0)) @ weights)
    full = 2.0 * np.pi * blob(np.maximum(d, rho) ** 2)
    return np.where(prod > 0, arc, full)


def _weighted_means(blob, a, d, t, quad: ProfileQuadrature):
    """``W(d, t) = int_0^t rho M(d, rho) / sqrt(t^2 - rho^2) drho`` for an array of distances.

    Uses ``rho = t sin(theta)``, which turns the integrand into
    ``t sin(theta) M(d, t sin(theta))``, and integrates only over the window of
    ``theta`` where the circle of radius ``rho`` meets the support.
    """
    out = np.zeros_like(d)
    if t <= 0:
        return out
    active = (d - a) < t
    if not active.any():
        return out
    da = d[active]
    lo = np.arcsin(np.clip((da - a) / t, 0.0, 1.0))
    hi = np.arcsin(np.clip((da + a) / t, 0.0, 1.0))
    xt, wt = np.polynomial.legendre.leggauss(quad.radial_nodes)
    xp, wp = np.polynomial.legendre.leggauss(quad.arc_nodes)
    total = np.zeros_like(da)
    for k in range(quad.radial_panels):
        pl = lo + (hi - lo) * k / quad.radial_panels
        ph = lo + (hi - lo) * (k + 1) / quad.radial_panels
        half = 0.5 * (ph - pl)
        theta = pl[:, None] + half[:, None] * (xt + 1.0)
        rho = t * np.sin(theta)
        m = _circle_integral(blob, a, np.broadcast_to(da[:, None], rho.shape), rho, xp, wp)
        total += half * ((rho * m) @ wt)
    out[active] = total
    return out


def radial_pressure_profile(distance, params: KaiserBesselParams, times,
                            quadrature: ProfileQuadrature = ProfileQuadrature(),
                            tolerance: float = 1e-4):
    """Pressure ``p(d, t)`` at distance ``d`` from a blob centered at the origin.

    ``distance`` may be a scalar (returns shape ``(len(times),)``) or an array
    of distances (returns ``(len(distance), len(times))``).  The time
    derivative is a central difference of the weighted circular means.  A
    second evaluation with doubled node counts estimates the quadrature
    residual; :class:`QuadratureError` is raised if it exceeds ``tolerance``
    relative to the peak pressure.
    """
    times = np.asarray(times, dtype=float)
    scalar = np.ndim(distance) == 0
    d = np.atleast_1d(np.asarray(distance, dtype=float))
    if (d < 0).any():
        raise ValueError("distances must be non-negative")
    if times.ndim != 1 or (times < 0).any() or (len(times) > 1 and (np.diff(times) <= 0).any()):
        raise ValueError("times must be strictly increasing and non-negative")

    dt = float(np.min(np.diff(times))) if len(times) > 1 else float(times[0]) or 1.0
    p = _profile_table(d, params, times, quadrature, dt)
    if tolerance is not None and tolerance > 0:
        fine = ProfileQuadrature(2 * quadrature.radial_nodes, quadrature.radial_panels,
                                 2 * quadrature.arc_nodes, quadrature.derivative_step)
        probe = _probe_indices(d)
        ref = _profile_table(d[probe], params, times, fine, dt)
        scale = max(np.abs(ref).max(), np.finfo(float).tiny)
        residual = np.abs(ref - p[probe]).max() / scale
        if residual > tolerance:
            raise QuadratureError("radial profile quadrature did not converge", residual)
    return p[0] if scalar else p


def _probe_indices(d, count=8):
    if len(d) <= count:
        return np.arange(len(d))
    return np.unique(np.linspace(0, len(d) - 1, count).round().astype(int))


def _profile_table(d, params, times, quad, dt):
    blob = _BlobSeries(params)
    a = params.support_radius
    h = quad.step_for(params, dt)
    out = np.empty((len(d), len(times)))
    for j, t in enumerate(times):
        if t - h < 0:
            # one-sided start: W(d, 0) = 0
            w_hi = _weighted_means(blob, a, d, t + h, quad)
            w_lo = _weighted_means(blob, a, d, max(t - h, 0.0), quad)
            out[:, j] = (w_hi - w_lo) / ((t + h) - max(t - h, 0.0))
        else:
            w_hi = _weighted_means(blob, a, d, t + h, quad)
            w_lo = _weighted_means(blob, a, d, t - h, quad)
            out[:, j] = (w_hi - w_lo) / (2.0 * h)
    out /= 2.0 * np.pi
    # finite propagation speed: nothing arrives before t = d - a
    out[times[None, :] < d[:, None] - a] = 0.0
    return out


@dataclass
class ProfileTable:
    """``p(d_k, t_j)`` on a uniform distance grid ``d_k = k * spacing``."""

    spacing: float
    values: np.ndarray  # (distances, times)
    params: KaiserBesselParams
    times: np.ndarray

    @property
    def distances(self) -> np.ndarray:
        return self.spacing * np.arange(self.values.shape[0])

    def interpolation_bound(self) -> float:
        """Relative bound on the linear-interpolation error from second differences."""
        v = self.values
        if v.shape[0] < 3:
            return math.inf
        second = np.abs(v[2:] - 2.0 * v[1:-1] + v[:-2]).max()
        return second / 8.0 / max(np.abs(v).max(), np.finfo(float).tiny)

    def __call__(self, dist) -> np.ndarray:
        """Interpolated traces for an array of distances, shape ``dist.shape + (times,)``."""
        dist = np.asarray(dist, dtype=float)
        pos = dist / self.spacing
        k = np.clip(np.floor(pos).astype(np.int64), 0, self.values.shape[0] - 2)
        w = (pos - k)[..., None]
        out = (1.0 - w) * self.values[k] + w * self.values[k + 1]
        out[self.times < dist[..., None] - self.params.support_radius] = 0.0
        return out


def build_profile_table(params: KaiserBesselParams, geom: MeasurementGeometry, max_distance: float,
                        resolution: int = 16, quadrature: ProfileQuadrature = ProfileQuadrature(),
                        tolerance: float = 5e-3) -> ProfileTable:
    """Tabulate the radial profile with ``resolution`` distance samples per time step.

    Raises :class:`InterpolationError` when the estimated linear-interpolation
    error exceeds ``tolerance`` relative to the peak.
    """
    if resolution < 2:
        raise InterpolationError("table resolution must be at least 2 samples per time step",
                                 math.inf)
    spacing = geom.time_step / resolution
    count = int(math.ceil((max_distance + params.support_radius) / spacing)) + 2
    times = geom.time_samples
    values = radial_pressure_profile(spacing * np.arange(count), params, times, quadrature)
    table = ProfileTable(spacing, values, params, times)
    bound = table.interpolation_bound()
    log.debug("profile table: %d distances, interpolation bound %.2e", count, bound)
    if bound > tolerance:
        raise InterpolationError(f"resolution {resolution} too coarse for tolerance {tolerance:g}",
                                 bound)
    return table


@dataclass
class SystemMatrix:
    """Dense matrix with rows ``n * Nt + j`` (detector ``n``, time ``j``) and one column per blob."""

    entries: np.ndarray
    grid: BasisGrid
    geometry: MeasurementGeometry
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = (self.geometry.data_size, self.grid.count)
        if self.entries.shape != expected:
            raise ValueError(f"matrix shape {self.entries.shape} does not match {expected}")

    @property
    def shape(self):
        return self.entries.shape

    def describe(self) -> dict:
        return {"grid": self.grid.to_dict(), "geometry": self.geometry.to_dict(), **self.metadata}


def max_detector_distance(grid: BasisGrid, geom: MeasurementGeometry) -> float:
    diff = geom.positions[:, None, :] - grid.centers[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())


def _fill_columns(out, table, grid, geom, cols):
    det = geom.positions
    centers = grid.centers[cols]
    dist = np.sqrt(((det[:, None, :] - centers[None, :, :]) ** 2).sum(-1))  # (Ns, cols)
    traces = table(dist)  # (Ns, cols, Nt)
    out[:, :] = traces.transpose(0, 2, 1).reshape(geom.data_size, len(cols))


def assemble_system_matrix(grid: BasisGrid, geom: MeasurementGeometry, resolution: int = 16,
                           quadrature: ProfileQuadrature = ProfileQuadrature(),
                           tolerance: float = 5e-3, block: int = 256, out=None) -> SystemMatrix:
    """Assemble ``A[n * Nt + j, i] = p(|s_n - r_i|, t_j)`` from an interpolated profile table.

    ``out`` may be a preallocated (e.g. memory-mapped) array; columns are
    written in blocks of ``block`` so full-size matrices can stream to disk.
    """
    table = build_profile_table(grid.kb, geom, max_detector_distance(grid, geom), resolution,
                                quadrature, tolerance)
    shape = (geom.data_size, grid.count)
    if out is None:
        out = np.empty(shape)
    elif out.shape != shape:
        raise ValueError(f"output buffer shape {out.shape} does not match {shape}")
    for start in range(0, grid.count, block):
        cols = np.arange(start, min(start + block, grid.count))
        buf = np.empty((shape[0], len(cols)))
        _fill_columns(buf, table, grid, geom, cols)
        out[:, start:start + len(cols)] = buf
    meta = {"table_resolution": resolution, "interpolation_bound": table.interpolation_bound()}
    return SystemMatrix(out, grid, geom, meta)


@dataclass
class Measurement:
    """Data vector together with the noise that produced it."""

    values: np.ndarray
    noise_fraction: float = 0.0
    seed: int | None = None

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return len(self.values)


def forward_apply(A: SystemMatrix | np.ndarray, x) -> Measurement:
    entries = A.entries if isinstance(A, SystemMatrix) else np.asarray(A)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != entries.shape[1]:
        raise ValueError(f"coefficient length {x.shape[-1]} does not match {entries.shape[1]} columns")
    return Measurement(entries @ x if x.ndim == 1 else x @ entries.T)
