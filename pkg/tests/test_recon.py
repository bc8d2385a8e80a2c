import numpy as np
import pytest

from cbct4d.geometry import ConeBeamGeometry, full_scan_angles
from cbct4d.phantom import AcquisitionSet, PhaseBinning
from cbct4d.projector import forward_project, rpt_transform
from cbct4d.recon import (
    ReconConfig,
    loss_ma,
    loss_rec,
    ossart,
    ossart_ttv,
    tv_value_grad,
    ttv_value_grad,
)
from cbct4d.volume import View, centered_volume


def small_geom(n_views=12):
    return ConeBeamGeometry(sad=500.0, sdd=800.0, det_w=20, det_h=16,
                            det_spacing_u=6.0, det_spacing_v=6.0,
                            angles=full_scan_angles(n_views))


def blob_volume(dims=(20, 20, 20), spacing=5.0):
    vol = centered_volume(dims, (spacing,) * 3)
    xs = (np.arange(dims[0]) - (dims[0] - 1) / 2.0) * spacing
    x, y, z = np.meshgrid(xs, xs, xs, indexing="ij")
    vol.data[x * x + y * y + z * z <= (0.3 * dims[0] * spacing) ** 2] = 0.02
    return vol


def test_tv_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(6, 6, 6))
    val, grad = tv_value_grad(x)
    h = 1e-6
    for _ in range(10):
        idx = tuple(rng.integers(0, 6, size=3))
        xp = x.copy()
        xp[idx] += h
        vp, _ = tv_value_grad(xp)
        fd = (vp - val) / h
        assert abs(fd - grad[idx]) < 1e-4 * max(1.0, abs(grad[idx]))


def test_tv_zero_for_constant():
    val, grad = tv_value_grad(np.full((5, 5, 5), 3.0))
    assert val < 5 * 5 * 5 * 2e-4  # only the sqrt(eps) floor contributes
    assert np.allclose(grad, 0.0)


def test_ttv_cyclic_and_matches_fd():
    rng = np.random.default_rng(1)
    stack = [rng.uniform(size=(4, 4, 4)) for _ in range(3)]
    val, grads = ttv_value_grad(stack)
    assert len(grads) == 3
    h = 1e-6
    for i in range(3):
        idx = (1, 2, 3)
        sp = [s.copy() for s in stack]
        sp[i][idx] += h
        vp, _ = ttv_value_grad(sp)
        fd = (vp - val) / h
        assert abs(fd - grads[i][idx]) < 1e-4 * max(1.0, abs(grads[i][idx]))
    # cyclic: rotating the stack rotates value-preserving
    vr, _ = ttv_value_grad(stack[1:] + stack[:1])
    assert np.isclose(vr, val)


def make_static_acq(vol, geom, S=64):
    views = [forward_project(vol, geom, k, S) for k in range(geom.n_views)]
    binning = PhaseBinning([0] * geom.n_views, [list(range(geom.n_views))])
    return AcquisitionSet(geom, views, binning)


def test_ossart_reduces_data_error():
    vol = blob_volume()
    geom = small_geom()
    acq = make_static_acq(vol, geom)
    cfg = ReconConfig(n_iters=10, n_subsets=4, tv_weight=0.0, S=64)
    init = vol.like(np.zeros(vol.dims))
    rec = ossart(acq.views, list(range(geom.n_views)), geom, cfg, init)
    err0 = sum(float(np.sum((forward_project(init, geom, k, 64).data - v.data) ** 2))
               for k, v in enumerate(acq.views))
    err1 = sum(float(np.sum((forward_project(rec, geom, k, 64).data - v.data) ** 2))
               for k, v in enumerate(acq.views))
    assert err1 < 0.05 * err0
    assert rec.data.min() >= 0.0  # nonnegativity clamp


def test_ossart_deterministic():
    vol = blob_volume()
    geom = small_geom()
    acq = make_static_acq(vol, geom)
    cfg = ReconConfig(n_iters=3, n_subsets=4, S=64)
    init = vol.like(np.zeros(vol.dims))
    a = ossart(acq.views, list(range(geom.n_views)), geom, cfg, init)
    b = ossart(acq.views, list(range(geom.n_views)), geom, cfg, init)
    assert np.array_equal(a.data, b.data)


def make_two_phase_acq(geom, S=64):
    v0 = blob_volume()
    v1 = v0.like(np.roll(v0.data, 1, axis=2))
    phase_of = [k % 2 for k in range(geom.n_views)]
    bins = [[k for k in range(geom.n_views) if k % 2 == i] for i in range(2)]
    vols = [v0, v1]
    views = [forward_project(vols[phase_of[k]], geom, k, S) for k in range(geom.n_views)]
    return AcquisitionSet(geom, views, PhaseBinning(phase_of, bins)), v0


def test_ossart_ttv_decouples_at_zero_weight():
    geom = small_geom()
    acq, v0 = make_two_phase_acq(geom)
    template = v0.like(np.zeros(v0.dims))
    cfg = ReconConfig(n_iters=3, n_subsets=3, ttv_weight=0.0, S=64)
    joint = ossart_ttv(acq, cfg, template)
    for i, b in enumerate(acq.binning.bins):
        solo = ossart([acq.views[k] for k in b], b, geom, cfg, template)
        assert np.array_equal(joint[i].data, solo.data)


def test_ossart_ttv_coupling_pulls_phases_together():
    geom = small_geom()
    acq, v0 = make_two_phase_acq(geom)
    template = v0.like(np.zeros(v0.dims))
    free = ossart_ttv(acq, ReconConfig(n_iters=5, n_subsets=3, ttv_weight=0.0, S=64), template)
    tied = ossart_ttv(acq, ReconConfig(n_iters=5, n_subsets=3, ttv_weight=1e-4, S=64), template)
    gap_free = float(np.sum((free[0].data - free[1].data) ** 2))
    gap_tied = float(np.sum((tied[0].data - tied[1].data) ** 2))
    assert gap_tied < gap_free


def test_ossart_ttv_rejects_empty_bin():
    geom = small_geom()
    views = [View(np.zeros((geom.det_w, geom.det_h))) for _ in range(geom.n_views)]
    binning = PhaseBinning([0] * geom.n_views,
                           [list(range(geom.n_views)), []])
    acq = AcquisitionSet(geom, views, binning)
    template = centered_volume((8, 8, 8), (8.0, 8.0, 8.0))
    with pytest.raises(ValueError):
        ossart_ttv(acq, ReconConfig(n_iters=1, S=64), template)


def test_losses():
    rng = np.random.default_rng(2)
    a = View(rng.uniform(size=(6, 4)))
    b = View(a.data + 0.1)
    assert np.isclose(loss_rec(a, a), 0.0)
    assert np.isclose(loss_rec(a, b), 0.1)  # mean absolute difference
    vol = blob_volume((8, 8, 8))
    vol.data[:] = np.roll(vol.data, 2, axis=0)  # break rotational symmetry
    geom = small_geom(4)
    r0 = rpt_transform(vol, geom, 0, 16)
    r1 = rpt_transform(vol, geom, 1, 16)
    assert np.isclose(loss_ma([r0], r0), 0.0)
    assert loss_ma([r0], r1) > 0.0


def test_recon_config_validation():
    with pytest.raises(ValueError):
        ReconConfig(n_iters=0)
    with pytest.raises(ValueError):
        ReconConfig(relaxation=2.5)
    with pytest.raises(ValueError):
        ReconConfig(tv_weight=-1.0)
