import json

import numpy as np
import pytest

from patsvd.forward import forward_apply
from patsvd.geometry import BasisGrid
from patsvd.phantoms import (Ellipse, add_noise, build_dataset, derive_seeds, export_pgm,
                             generate_phantom, load_dataset, random_phantom_spec, render_phantom,
                             save_dataset)


def test_phantom_range_and_determinism():
    g = BasisGrid(24)
    x = generate_phantom(11, g)
    assert x.shape == (g.count,)
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert x.max() > 0.5  # the skull ring is always present
    np.testing.assert_array_equal(x, generate_phantom(11, g))
    assert not np.array_equal(x, generate_phantom(12, g))


def test_phantom_support_inside_unit_disk():
    g = BasisGrid(40)
    x = np.mean([generate_phantom(s, g, deformation_amplitude=0.0) for s in range(10)], axis=0)
    outside = np.hypot(*g.centers.T) > 1.0
    assert not x[outside].any()


def test_ellipse_membership():
    e = Ellipse((0.1, 0.0), (0.3, 0.1), np.pi / 2, 1.0)
    assert e.inside(0.1, 0.29) and not e.inside(0.39, 0.0)


def test_deformation_amplitude_controls_warp():
    pts = BasisGrid(32).centers
    spec = random_phantom_spec(3, deformation_amplitude=0.0)
    flat = render_phantom(spec, pts)
    direct = np.clip(sum(e.intensity * e.inside(*pts.T) for e in spec.ellipses), 0, 1)
    np.testing.assert_array_equal(flat, direct)
    warped = render_phantom(random_phantom_spec(3, deformation_amplitude=0.08), pts)
    assert 0 < np.count_nonzero(warped != flat) < 0.3 * len(pts)


def test_noise_model():
    y = np.linspace(0.0, 2.0, 200000)
    m = add_noise(y, 0.07, seed=5)
    assert np.std(m.values - y) == pytest.approx(0.07 * 2.0, rel=0.01)
    np.testing.assert_array_equal(add_noise(y, 0.07, seed=5).values, m.values)
    np.testing.assert_array_equal(add_noise(y, 0.0, seed=5).values, y)
    with pytest.raises(ValueError):
        add_noise(y, -0.1, 0)


def test_seed_domains_are_disjoint():
    tr = derive_seeds(7, "train", 500)
    te = derive_seeds(7, "test", 500)
    va = derive_seeds(7, "validation", 500)
    assert len(set(tr)) == 500
    assert not set(tr) & set(te) and not set(tr) & set(va) and not set(va) & set(te)
    assert derive_seeds(7, "train", 3) == tr[:3]
    assert not set(derive_seeds(7, "test", 50, stream=1)) & set(te)
    with pytest.raises(ValueError):
        derive_seeds(7, "holdout", 3)


def test_build_dataset(small_grid, small_matrix):
    ds = build_dataset(4, small_grid, small_matrix, 0.05, "test", seed=3)
    assert ds.X.shape == (4, small_grid.count) and ds.Y.shape == (4, small_matrix.shape[0])
    clean = forward_apply(small_matrix, ds.X).values
    assert 0 < np.abs(ds.Y - clean).max()
    tr = build_dataset(3, small_grid, small_matrix, 0.05, "train", seed=3)
    assert tr.noise_fraction == 0.0
    np.testing.assert_allclose(tr.Y, forward_apply(small_matrix, tr.X).values, atol=1e-13)
    with pytest.raises(ValueError):
        build_dataset(1, BasisGrid(5), small_matrix, 0.0, "test", 0)


def test_dataset_round_trip_and_corruption(tmp_path, small_grid, small_matrix):
    ds = build_dataset(3, small_grid, small_matrix, 0.07, "validation", seed=9)
    d = save_dataset(ds, tmp_path / "val")
    back = load_dataset(d)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.Y, ds.Y)
    assert back.role == "validation" and back.phantom_seeds == ds.phantom_seeds
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["count"] == 3
    raw = bytearray((d / "y_00001.f64").read_bytes())
    raw[0] ^= 1
    (d / "y_00001.f64").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        load_dataset(d)
    load_dataset(d, verify=False)


def test_export_pgm(tmp_path, small_grid, small_matrix):
    ds = build_dataset(2, small_grid, small_matrix, 0.0, "test", seed=1)
    export_pgm(ds, small_grid, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.pgm")) == ["phantom_00000.pgm", "phantom_00001.pgm"]
