"""Discretization of the photoacoustic source and the measurement setup.

A source is expanded in translated Kaiser-Bessel blobs whose centers form an
``N x N`` Cartesian grid on ``[-1, 1]^2``.  Pressure is recorded by point
detectors on the upper half of the unit circle at equidistant times.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import iv


@dataclass(frozen=True)
class KaiserBesselParams:
    """Generalized Kaiser-Bessel blob (support radius, taper, smoothness order)."""

    support_radius: float = 0.055
    taper: float = 7.0
    order: int = 2

    def __post_init__(self):
        if not self.support_radius > 0:
            raise ValueError(f"support_radius must be positive, got {self.support_radius}")
        if not self.taper > 0:
            raise ValueError(f"taper must be positive, got {self.taper}")
        if int(self.order) != self.order or self.order < 0:
            raise ValueError(f"order must be a non-negative integer, got {self.order}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def scaled_for(cls, size: int, reference_size: int = 128, reference_radius: float = 0.055,
                   taper: float = 7.0, order: int = 2) -> "KaiserBesselParams":
        """Blob whose support spans as many grid spacings on a ``size`` grid as the reference does."""
        return cls(reference_radius * (reference_size - 1) / (size - 1), taper, order)


def kaiser_bessel_eval(offset, params: KaiserBesselParams = KaiserBesselParams()):
    """Evaluate the blob at an offset ``(dx, dy)`` or an array of offsets (trailing dim 2).

    Nonzero exactly on the closed disk of radius ``support_radius``.
    """
    offset = np.asarray(offset, dtype=float)
    if offset.shape[-1:] != (2,):
        raise ValueError(f"offset must have trailing dimension 2, got shape {offset.shape}")
    r = np.hypot(offset[..., 0], offset[..., 1])
    out = kaiser_bessel_radial(r, params)
    return float(out) if out.ndim == 0 else out


def kaiser_bessel_radial(r, params: KaiserBesselParams = KaiserBesselParams()):
    """Blob value as a function of the distance ``r`` to its center."""
    r = np.asarray(r, dtype=float)
    a, gamma, m = params.support_radius, params.taper, int(params.order)
    u = np.clip(1.0 - (r / a) ** 2, 0.0, None)
    s = np.sqrt(u)
    val = s**m * iv(m, gamma * s) / iv(m, gamma)
    return np.where(r <= a, val, 0.0)


@dataclass(frozen=True)
class BasisGrid:
    """``N x N`` blob centers covering ``[-1, 1]^2``.

    Linear index ``i = i2 * N + i1`` (0-based) belongs to the center
    ``(-1 + 2 i1 / (N - 1), -1 + 2 i2 / (N - 1))``, so ``x.reshape(N, N)`` is
    an image with rows along the second coordinate.
    """

    size: int
    kb: KaiserBesselParams = field(default_factory=KaiserBesselParams)

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"grid size must be at least 2, got {self.size}")

    @property
    def count(self) -> int:
        return self.size * self.size

    @property
    def spacing(self) -> float:
        return 2.0 / (self.size - 1)

    @property
    def axis(self) -> np.ndarray:
        return -1.0 + self.spacing * np.arange(self.size)

    @property
    def centers(self) -> np.ndarray:
        """Array of shape ``(N*N, 2)`` in linear-index order."""
        xx, yy = np.meshgrid(self.axis, self.axis, indexing="xy")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def as_image(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] != self.count:
            raise ValueError(f"expected {self.count} coefficients, got {x.shape[-1]}")
        return x.reshape(x.shape[:-1] + (self.size, self.size))

    def evaluate(self, x, points) -> np.ndarray:
        """Evaluate the expansion ``sum_i x_i phi(r - r_i)`` at ``points`` (shape (..., 2))."""
        x = np.asarray(x, dtype=float)
        points = np.asarray(points, dtype=float)
        flat = points.reshape(-1, 2)
        out = np.zeros(len(flat))
        a = self.kb.support_radius
        h = self.spacing
        # only the few centers within one support radius contribute
        reach = int(np.ceil(a / h))
        img = self.as_image(x)
        i1 = np.rint((flat[:, 0] + 1.0) / h).astype(int)
        i2 = np.rint((flat[:, 1] + 1.0) / h).astype(int)
        for d2 in range(-reach, reach + 1):
            for d1 in range(-reach, reach + 1):
                k1, k2 = i1 + d1, i2 + d2
                ok = (k1 >= 0) & (k1 < self.size) & (k2 >= 0) & (k2 < self.size)
                if not ok.any():
                    continue
                c1 = -1.0 + h * k1[ok]
                c2 = -1.0 + h * k2[ok]
                r = np.hypot(flat[ok, 0] - c1, flat[ok, 1] - c2)
                out[ok] += img[k2[ok], k1[ok]] * kaiser_bessel_radial(r, self.kb)
        return out.reshape(points.shape[:-1])

    def to_dict(self) -> dict:
        return {"size": self.size, "kb": self.kb.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisGrid":
        return cls(size=int(d["size"]), kb=KaiserBesselParams(**d["kb"]))


@dataclass(frozen=True)
class MeasurementGeometry:
    """Detectors ``s_n = (cos(n pi / Ns), sin(n pi / Ns))`` and times ``t_j = j T / Nt``."""

    detectors: int
    times: int
    horizon: float = 3.75

    def __post_init__(self):
        if self.detectors < 1 or self.times < 1:
            raise ValueError("detector and time counts must be positive")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")

    @property
    def data_size(self) -> int:
        return self.detectors * self.times

    @property
    def time_step(self) -> float:
        return self.horizon / self.times

    @property
    def positions(self) -> np.ndarray:
        ang = np.pi * np.arange(1, self.detectors + 1) / self.detectors
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)

    @property
    def time_samples(self) -> np.ndarray:
        return self.time_step * np.arange(1, self.times + 1)

    def as_traces(self, y) -> np.ndarray:
        """View a data vector as ``(detectors, times)``; row index is ``n * Nt + j``."""
        y = np.asarray(y)
        if y.shape[-1] != self.data_size:
            raise ValueError(f"expected {self.data_size} samples, got {y.shape[-1]}")
        return y.reshape(y.shape[:-1] + (self.detectors, self.times))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementGeometry":
        return cls(detectors=int(d["detectors"]), times=int(d["times"]), horizon=float(d["horizon"]))


FULL_GRID = BasisGrid(128)
FULL_GEOMETRY = MeasurementGeometry(detectors=400, times=376, horizon=3.75)
DESK_GRID = BasisGrid(32, KaiserBesselParams.scaled_for(32))
DESK_GEOMETRY = MeasurementGeometry(detectors=64, times=96, horizon=3.75)
