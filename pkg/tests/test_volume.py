import json

import numpy as np
import pytest

from cbct4d.volume import (
    RayVolume,
    View,
    Volume3,
    centered_volume,
    read_ray_volume,
    read_view,
    read_volume,
    sample_nearest,
    sample_trilinear,
    write_ray_volume,
    write_view,
    write_volume,
)


def test_centered_volume_bbox_symmetric():
    vol = centered_volume((10, 8, 6), (2.0, 2.0, 2.0))
    assert vol.data.shape == (10, 8, 6)
    assert np.allclose(vol.bbox_min, -np.asarray(vol.bbox_max))
    assert np.allclose(np.asarray(vol.bbox_max) - np.asarray(vol.bbox_min), [20.0, 16.0, 12.0])


def test_voxel_center_world_coordinates():
    vol = centered_volume((4, 4, 4), (1.0, 1.0, 1.0))
    # voxel (0,0,0) center sits half a voxel inside the bbox corner
    c = np.asarray(vol.origin)
    assert np.allclose(c, np.asarray(vol.bbox_min) + 0.5)


def test_sample_nearest_exact_centers():
    vol = centered_volume((4, 3, 2), (1.0, 1.0, 1.0))
    vol.data[:] = np.arange(vol.data.size).reshape(vol.data.shape)
    for idx in [(0, 0, 0), (3, 2, 1), (1, 2, 0)]:
        p = np.asarray(vol.origin) + np.asarray(idx) * np.asarray(vol.spacing)
        assert sample_nearest(vol, p) == vol.data[idx]


def test_sample_nearest_outside_is_zero():
    vol = centered_volume((4, 4, 4), (1.0, 1.0, 1.0))
    vol.data[:] = 7.0
    assert sample_nearest(vol, np.array([100.0, 0.0, 0.0])) == 0.0
    assert sample_nearest(vol, np.array([0.0, -100.0, 0.0])) == 0.0


def test_sample_nearest_halfway_rounds_down():
    # a point exactly between voxel centers 0 and 1 must resolve to voxel 0
    vol = centered_volume((4, 4, 4), (1.0, 1.0, 1.0))
    vol.data[:] = 0.0
    vol.data[0, 0, 0] = 1.0
    vol.data[1, 0, 0] = 2.0
    p = np.asarray(vol.origin) + np.array([0.5, 0.0, 0.0])
    assert sample_nearest(vol, p) == 1.0


def test_sample_trilinear_matches_linear_field():
    # a trilinear interpolant reproduces any affine function exactly
    vol = centered_volume((6, 6, 6), (2.0, 2.0, 2.0))
    xs = np.asarray(vol.origin)[0] + np.arange(6) * 2.0
    x, y, z = np.meshgrid(xs, xs, xs, indexing="ij")
    vol.data[:] = 0.5 * x - 0.25 * y + 1.5 * z + 3.0
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rng.uniform(-3.0, 3.0, size=3)
        want = 0.5 * p[0] - 0.25 * p[1] + 1.5 * p[2] + 3.0
        assert np.isclose(sample_trilinear(vol, p), want)


def test_volume_roundtrip(tmp_path):
    vol = centered_volume((5, 4, 3), (1.0, 2.0, 3.0))
    vol.data[:] = np.random.default_rng(0).normal(size=vol.data.shape)
    path = tmp_path / "a.vol"
    write_volume(vol, path)
    back = read_volume(path)
    # storage is float32: compare after the same cast
    assert np.array_equal(back.data, vol.data.astype(np.float32).astype(np.float64))
    assert back.spacing == vol.spacing
    assert (tmp_path / "a.vol.json").exists()


def test_volume_file_layout_x_fastest(tmp_path):
    vol = centered_volume((3, 2, 2), (1.0, 1.0, 1.0))
    vol.data[:] = np.arange(12.0).reshape(3, 2, 2)
    path = tmp_path / "b.vol"
    write_volume(vol, path)
    raw = np.fromfile(path, dtype="<f4")
    # x varies fastest: the first three values walk along x at y=z=0
    assert np.array_equal(raw[:3], vol.data[:, 0, 0].astype(np.float32))


def test_view_roundtrip(tmp_path):
    view = View(data=np.random.default_rng(1).normal(size=(7, 5)))
    path = tmp_path / "v.vol"
    write_view(view, path)
    back = read_view(path)
    assert np.array_equal(back.data, view.data.astype(np.float32).astype(np.float64))


def test_ray_volume_roundtrip_and_layout(tmp_path):
    data = np.random.default_rng(2).normal(size=(4, 3, 6)).astype(np.float32)
    rv = RayVolume(data=data.copy(), step_len=1.25)
    path = tmp_path / "r.vol"
    write_ray_volume(rv, path)
    back = read_ray_volume(path)
    assert np.array_equal(back.data, data)
    assert back.step_len == rv.step_len
    raw = np.fromfile(path, dtype="<f4")
    # s varies fastest
    assert np.array_equal(raw[: data.shape[2]], data[0, 0, :])


def test_read_volume_size_mismatch_raises(tmp_path):
    vol = centered_volume((3, 3, 3), (1.0, 1.0, 1.0))
    path = tmp_path / "c.vol"
    write_volume(vol, path)
    sidecar = tmp_path / "c.vol.json"
    meta = json.loads(sidecar.read_text())
    meta["dims"] = [4, 3, 3]
    sidecar.write_text(json.dumps(meta))
    with pytest.raises(ValueError):
        read_volume(path)


def test_volume_like_copies_grid_not_data():
    vol = centered_volume((4, 4, 4), (1.5, 1.5, 1.5))
    vol.data[:] = 9.0
    other = vol.like(np.zeros((4, 4, 4)))
    assert other.spacing == vol.spacing
    assert np.allclose(other.origin, vol.origin)
    assert other.data.sum() == 0.0
