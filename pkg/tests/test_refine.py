import numpy as np
import pytest

from cbct4d.dvf import Dvf
from cbct4d.geometry import ConeBeamGeometry, full_scan_angles
from cbct4d.phantom import AcquisitionSet, PhaseBinning
from cbct4d.projector import forward_project
from cbct4d.refine import (
    RefineConfig,
    dvf_refine,
    gradient_check,
    refine_all_phases,
)
from cbct4d.volume import centered_volume


def small_geom(n_views=8):
    return ConeBeamGeometry(sad=400.0, sdd=650.0, det_w=16, det_h=12,
                            det_spacing_u=8.0, det_spacing_v=8.0,
                            angles=full_scan_angles(n_views))


def blob(dims=(14, 14, 14), spacing=6.0, shift=0):
    vol = centered_volume(dims, (spacing,) * 3)
    xs = np.arange(dims[0]) - (dims[0] - 1) / 2.0
    x, y, z = np.meshgrid(xs, xs, xs, indexing="ij")
    vol.data[x * x + y * y + (z - shift) ** 2 <= 16.0] = 0.03
    return vol


def shift_field(dims, dz):
    disp = np.zeros(dims + (3,))
    disp[..., 2] = dz
    return Dvf(disp)


def two_phase_acq(S=32):
    geom = small_geom(8)
    vols = [blob(), blob(shift=1)]
    phase_of = [k % 2 for k in range(8)]
    bins = [[0, 2, 4, 6], [1, 3, 5, 7]]
    views = [forward_project(vols[phase_of[k]], geom, k, S) for k in range(8)]
    return AcquisitionSet(geom, views, PhaseBinning(phase_of, bins)), vols


def test_refine_decreases_objective_and_error():
    acq, vols = two_phase_acq()
    # phase 1 is phase 0 shifted by +1 voxel in z: D_{0->1} pulls 0 onto 1
    dvfs = {1: shift_field(vols[0].dims, -1.0)}
    init = vols[0].like(np.clip(vols[0].data + 0.01 *
                                np.random.default_rng(0).normal(size=vols[0].dims), 0, None))
    cfg = RefineConfig(n_iters=8, S=32)
    out = dvf_refine(init, 0, dvfs, acq, cfg)
    err0 = float(np.mean((init.data - vols[0].data) ** 2))
    err1 = float(np.mean((out.data - vols[0].data) ** 2))
    assert err1 < err0


def test_refine_single_phase_mode():
    acq, vols = two_phase_acq()
    init = vols[0].like(np.zeros(vols[0].dims))
    cfg = RefineConfig(n_iters=5, use_all_phases=False, S=32)
    out = dvf_refine(init, 0, {}, acq, cfg)
    assert float(np.mean((out.data - vols[0].data) ** 2)) < \
        float(np.mean((init.data - vols[0].data) ** 2))


def test_refine_missing_field_raises():
    acq, vols = two_phase_acq()
    cfg = RefineConfig(n_iters=2, S=32)
    with pytest.raises(ValueError):
        dvf_refine(vols[0], 0, {}, acq, cfg)


def test_refine_log_csv(tmp_path):
    acq, vols = two_phase_acq()
    dvfs = {1: shift_field(vols[0].dims, -1.0)}
    log = tmp_path / "refine.csv"
    cfg = RefineConfig(n_iters=3, S=32)
    init = vols[0].like(np.zeros(vols[0].dims))
    dvf_refine(init, 0, dvfs, acq, cfg, log_path=log, gt=vols[0])
    lines = log.read_text().strip().splitlines()
    assert lines[0] == "iter,objective,psnr"
    assert len(lines) >= 4
    objs = [float(l.split(",")[1]) for l in lines[1:]]
    assert objs[-1] <= objs[0]


def test_refine_deterministic():
    acq, vols = two_phase_acq()
    dvfs = {1: shift_field(vols[0].dims, -1.0)}
    cfg = RefineConfig(n_iters=4, S=32)
    a = dvf_refine(vols[0], 0, dvfs, acq, cfg)
    b = dvf_refine(vols[0], 0, dvfs, acq, cfg)
    assert np.array_equal(a.data, b.data)


def test_refine_all_phases():
    acq, vols = two_phase_acq()
    dvfs = {(0, 1): shift_field(vols[0].dims, -1.0),
            (1, 0): shift_field(vols[0].dims, 1.0)}
    inits = [v.like(np.zeros(v.dims)) for v in vols]
    cfg = RefineConfig(n_iters=4, S=32)
    outs = refine_all_phases(inits, dvfs, acq, cfg)
    assert len(outs) == 2
    for out, gt in zip(outs, vols):
        assert float(np.mean((out.data - gt.data) ** 2)) < \
            float(np.mean(gt.data ** 2))


def test_gradient_check_identity_field():
    acq, vols = two_phase_acq()
    dvfs = {1: shift_field(vols[0].dims, -1.0)}
    cfg = RefineConfig(S=32)
    res = gradient_check(vols[0], 0, dvfs, acq, cfg, n_probes=5)
    assert res["max_rel_error"] < 1e-3


def test_gradient_check_with_tv():
    acq, vols = two_phase_acq()
    dvfs = {1: shift_field(vols[0].dims, -1.0)}
    cfg = RefineConfig(S=32, tv_weight=1e-3)
    res = gradient_check(vols[0], 0, dvfs, acq, cfg, n_probes=5)
    assert res["max_rel_error"] < 1e-3
