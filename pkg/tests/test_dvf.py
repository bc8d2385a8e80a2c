import numpy as np
import pytest

from cbct4d.dvf import (
    Dvf,
    demons_register,
    dvf_from_mm,
    read_dvf,
    warp,
    warp_adjoint,
    write_dvf,
)
from cbct4d.volume import centered_volume


def rand_volume(dims=(12, 12, 12), seed=0):
    vol = centered_volume(dims, (2.0, 2.0, 2.0))
    vol.data[:] = np.random.default_rng(seed).normal(size=dims)
    return vol


def rand_dvf(dims=(12, 12, 12), scale=1.5, seed=1):
    disp = np.random.default_rng(seed).uniform(-scale, scale, size=dims + (3,))
    return Dvf(disp)


def test_dvf_validation():
    with pytest.raises(ValueError):
        Dvf(np.zeros((4, 4, 4, 2)))
    bad = np.zeros((4, 4, 4, 3))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Dvf(bad)


def test_dvf_from_mm_scales_by_spacing():
    disp_mm = np.zeros((4, 4, 4, 3))
    disp_mm[..., 2] = 6.0
    d = dvf_from_mm(disp_mm, (1.0, 2.0, 3.0))
    assert np.allclose(d.disp[..., 2], 2.0)
    assert np.allclose(d.disp[..., 0], 0.0)


def test_warp_identity():
    vol = rand_volume()
    d = Dvf(np.zeros(vol.dims + (3,)))
    assert np.array_equal(warp(vol, d).data, vol.data)


def test_warp_integer_translation():
    vol = rand_volume()
    disp = np.zeros(vol.dims + (3,))
    disp[..., 0] = 2.0  # pull from two voxels ahead in x
    out = warp(vol, d := Dvf(disp))
    assert np.array_equal(out.data[:-2], vol.data[2:])
    # voxels whose source falls outside read zero
    assert np.all(out.data[-2:] == 0.0)


def test_warp_is_trilinear_between_centers():
    vol = rand_volume()
    disp = np.zeros(vol.dims + (3,))
    disp[..., 1] = 0.25
    out = warp(vol, Dvf(disp))
    want = 0.75 * vol.data[:, :-1, :] + 0.25 * vol.data[:, 1:, :]
    assert np.allclose(out.data[:, :-1, :], want)


def test_warp_dims_mismatch():
    vol = rand_volume((8, 8, 8))
    with pytest.raises(ValueError):
        warp(vol, rand_dvf((9, 8, 8)))


def test_warp_adjoint_identity():
    vol = rand_volume()
    d = Dvf(np.zeros(vol.dims + (3,)))
    assert np.array_equal(warp_adjoint(vol, d).data, vol.data)


def test_warp_adjointness():
    # <warp(x), y> == <x, warp_adjoint(y)> for random fields
    rng = np.random.default_rng(7)
    for seed in range(3):
        x = rand_volume(seed=seed)
        d = rand_dvf(seed=seed + 10)
        y = x.like(rng.normal(size=x.dims))
        lhs = float(np.sum(warp(x, d).data * y.data))
        rhs = float(np.sum(x.data * warp_adjoint(y, d).data))
        assert abs(lhs - rhs) / max(abs(lhs), abs(rhs)) < 1e-12


def test_demons_identity_inputs_give_zero_field():
    vol = rand_volume((16, 16, 16))
    d = demons_register(vol, vol, levels=2, iters=10)
    assert np.abs(d.disp).max() < 1e-9


def test_demons_recovers_translation():
    # a smooth blob shifted by 2 voxels along z
    dims = (24, 24, 24)
    xs = np.arange(24) - 11.5
    x, y, z = np.meshgrid(xs, xs, xs, indexing="ij")
    fixed = centered_volume(dims, (1.0, 1.0, 1.0))
    fixed.data[:] = np.exp(-(x * x + y * y + z * z) / 30.0)
    moving = fixed.like(np.exp(-(x * x + y * y + (z - 2.0) ** 2) / 30.0))
    d = demons_register(moving, fixed, levels=2, iters=60)
    core = np.abs(fixed.data) > 0.3
    # pull convention: warp(moving, d)(x) = moving(x + d(x)); blob sits at z=+2
    mean_dz = d.disp[..., 2][core].mean()
    assert abs(mean_dz - 2.0) < 0.3
    mse_before = np.mean((moving.data - fixed.data) ** 2)
    mse_after = np.mean((warp(moving, d).data - fixed.data) ** 2)
    assert mse_after < 0.1 * mse_before


def test_demons_deterministic():
    a = rand_volume((16, 16, 16), seed=3)
    b = rand_volume((16, 16, 16), seed=4)
    d1 = demons_register(a, b, levels=2, iters=5)
    d2 = demons_register(a, b, levels=2, iters=5)
    assert np.array_equal(d1.disp, d2.disp)


def test_demons_rejects_bad_args():
    a = rand_volume((8, 8, 8))
    with pytest.raises(ValueError):
        demons_register(a, rand_volume((9, 8, 8)))
    with pytest.raises(ValueError):
        demons_register(a, a, levels=0)
    with pytest.raises(ValueError):
        demons_register(a, a, levels=8)


def test_dvf_roundtrip(tmp_path):
    d = rand_dvf((6, 5, 4))
    base = tmp_path / "field"
    write_dvf(d, base)
    back = read_dvf(base)
    assert back.dims == d.dims
    assert np.array_equal(back.disp, d.disp.astype(np.float32).astype(np.float64))
    for c in ("dx", "dy", "dz"):
        assert (tmp_path / f"field.{c}.vol").exists()
    assert (tmp_path / "field.dvf.json").exists()
