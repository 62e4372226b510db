"""Random Shepp-Logan-like phantoms and (x, y) datasets.

A phantom is a sum of constant-intensity ellipses (a skull ring, a handful of
interior objects and a few fine details) rendered through a smooth random
displacement field and clamped to ``[0, 1]``.  Coefficients are point samples
of that image at the blob centers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .forward import Measurement, SystemMatrix, forward_apply
from .geometry import BasisGrid
from .io import checksum_hex, file_checksum, read_vector, write_pgm, write_vector

log = logging.getLogger(__name__)

ROLES = ("train", "validation", "test")
# domain-separation tags for seed derivation
_ROLE_TAGS = {"train": 1, "validation": 2, "test": 3}
_PHANTOM, _NOISE = 0, 1


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    angle: float
    intensity: float

    def inside(self, x, y):
        c, s = np.cos(self.angle), np.sin(self.angle)
        dx, dy = x - self.center[0], y - self.center[1]
        u = (c * dx + s * dy) / self.semi_axes[0]
        v = (-s * dx + c * dy) / self.semi_axes[1]
        return u * u + v * v <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    ellipses: tuple[Ellipse, ...]
    deformation_amplitude: float = 0.08
    correlation_length: float = 0.3
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def _fit_in_disk(center, semi):
    # an ellipse lies in the unit disk if |center| + largest semi-axis <= 1
    room = 1.0 - np.hypot(*center)
    big = max(semi)
    if big > room:
        scale = room / big
        semi = (semi[0] * scale, semi[1] * scale)
    return semi


def random_phantom_spec(seed: int, deformation_amplitude: float = 0.08,
                        correlation_length: float = 0.3) -> PhantomSpec:
    rng = np.random.default_rng(seed)
    skull_center = tuple(rng.uniform(-0.05, 0.05, 2))
    skull_semi = (0.69 * rng.uniform(0.85, 1.0), 0.92 * rng.uniform(0.85, 1.0))
    skull_semi = _fit_in_disk(skull_center, skull_semi)
    skull_angle = rng.uniform(0.0, np.pi)
    ellipses = [
        Ellipse(skull_center, skull_semi, skull_angle, 1.0),
        Ellipse(skull_center, (0.92 * skull_semi[0], 0.92 * skull_semi[1]), skull_angle, -0.8),
    ]

    def scatter(count, lo, hi, inten_lo, inten_hi):
        for _ in range(count):
            r = 0.7 * np.sqrt(rng.uniform())
            phi = rng.uniform(0.0, 2 * np.pi)
            center = (skull_center[0] + r * np.cos(phi), skull_center[1] + r * np.sin(phi))
            semi = _fit_in_disk(center, tuple(rng.uniform(lo, hi, 2)))
            ellipses.append(Ellipse(center, semi, rng.uniform(0.0, np.pi),
                                    rng.uniform(inten_lo, inten_hi)))

    scatter(int(rng.integers(6, 13)), 0.05, 0.4, -0.4, 0.8)
    scatter(int(rng.integers(3, 9)), 0.01, 0.05, -0.4, 0.8)
    return PhantomSpec(tuple(ellipses), deformation_amplitude, correlation_length, seed)


def _displacement(points, spec: PhantomSpec, rng):
    """Smooth random displacement: bicubic spline through Gaussian control values."""
    n = int(np.ceil(2.4 / spec.correlation_length)) + 1
    ctrl = np.linspace(-1.2, 1.2, n)
    field_ = rng.standard_normal((2, n, n))
    dx = RectBivariateSpline(ctrl, ctrl, field_[0], kx=3, ky=3)(points[:, 0], points[:, 1], grid=False)
    dy = RectBivariateSpline(ctrl, ctrl, field_[1], kx=3, ky=3)(points[:, 0], points[:, 1], grid=False)
    disp = np.stack([dx, dy], axis=1)
    peak = np.hypot(dx, dy).max()
    if spec.deformation_amplitude == 0 or peak == 0:
        return np.zeros_like(points)
    return disp * (spec.deformation_amplitude / peak)


def render_phantom(spec: PhantomSpec, points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    # the deformation draws from its own stream so it does not perturb the ellipse draws
    rng = np.random.default_rng([spec.seed, 7])
    warped = points + _displacement(points, spec, rng)
    img = np.zeros(len(points))
    for e in spec.ellipses:
        img += e.intensity * e.inside(warped[:, 0], warped[:, 1])
    return np.clip(img, 0.0, 1.0)


def generate_phantom(seed: int, grid: BasisGrid, deformation_amplitude: float = 0.08) -> np.ndarray:
    """Coefficient vector of a random phantom sampled at the grid centers."""
    return render_phantom(random_phantom_spec(seed, deformation_amplitude), grid.centers)


def add_noise(y, noise_fraction: float, seed) -> Measurement:
    """Add i.i.d. Gaussian noise with standard deviation ``noise_fraction * max(y)``."""
    if noise_fraction < 0:
        raise ValueError(f"noise fraction must be non-negative, got {noise_fraction}")
    clean = np.asarray(y, dtype=float)
    if noise_fraction == 0:
        return Measurement(clean.copy(), 0.0, seed)
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(clean.shape) * (noise_fraction * clean.max())
    return Measurement(clean + xi, noise_fraction, seed)


def derive_seeds(master: int, role: str, count: int, stream: int = _PHANTOM) -> list[int]:
    if role not in _ROLE_TAGS:
        raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")
    ss = np.random.SeedSequence(master, spawn_key=(_ROLE_TAGS[role], stream))
    return [int(s) for s in ss.generate_state(count, dtype=np.uint64)] if count else []


@dataclass
class Dataset:
    X: np.ndarray  # (count, N*N)
    Y: np.ndarray  # (count, Nt*Ns)
    role: str
    seed: int
    noise_fraction: float
    phantom_seeds: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.X)

    def __iter__(self):
        return iter(zip(self.X, self.Y))


def build_dataset(count: int, grid: BasisGrid, A: SystemMatrix, noise_fraction: float, role: str,
                  seed: int, deformation_amplitude: float = 0.08) -> Dataset:
    """Phantoms with their data ``y = A x + xi``; training data are always noise-free."""
    if role == "train":
        noise_fraction = 0.0
    if A.grid.count != grid.count:
        raise ValueError("matrix does not belong to this grid")
    seeds = derive_seeds(seed, role, count)
    noise_seeds = derive_seeds(seed, role, count, _NOISE)
    X = np.empty((count, grid.count))
    Y = np.empty((count, A.geometry.data_size))
    for n, (s, ns) in enumerate(zip(seeds, noise_seeds)):
        X[n] = generate_phantom(s, grid, deformation_amplitude)
        Y[n] = add_noise(forward_apply(A, X[n]).values, noise_fraction, ns).values
    meta = {"grid": grid.to_dict(), "geometry": A.geometry.to_dict(),
            "deformation_amplitude": deformation_amplitude}
    return Dataset(X, Y, role, seed, noise_fraction, seeds, meta)


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for n, (x, y) in enumerate(ds):
        xp, yp = d / f"x_{n:05d}.f64", d / f"y_{n:05d}.f64"
        write_vector(xp, x)
        write_vector(yp, y)
        files.append({"x": xp.name, "y": yp.name,
                      "x_checksum": checksum_hex(file_checksum(xp)),
                      "y_checksum": checksum_hex(file_checksum(yp))})
    manifest = {"role": ds.role, "seed": ds.seed, "noise_fraction": ds.noise_fraction,
                "count": len(ds), "phantom_seeds": ds.phantom_seeds, "samples": files, **ds.meta}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def load_dataset(directory, verify: bool = True) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    xs, ys = [], []
    for entry in manifest["samples"]:
        if verify:
            for key in ("x", "y"):
                got = checksum_hex(file_checksum(d / entry[key]))
                if got != entry[f"{key}_checksum"]:
                    raise ValueError(f"{d / entry[key]}: checksum mismatch")
        xs.append(read_vector(d / entry["x"]))
        ys.append(read_vector(d / entry["y"]))
    meta = {k: manifest[k] for k in ("grid", "geometry", "deformation_amplitude") if k in manifest}
    X = np.array(xs) if xs else np.empty((0, 0))
    Y = np.array(ys) if ys else np.empty((0, 0))
    return Dataset(X, Y, manifest["role"], manifest["seed"], manifest["noise_fraction"],
                   manifest["phantom_seeds"], meta)


def export_pgm(ds: Dataset, grid: BasisGrid, directory, limit: int | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for n, x in enumerate(ds.X[:limit]):
        write_pgm(d / f"phantom_{n:05d}.pgm", grid.as_image(x))
