"""Analytic breathing phantom, ground-truth deformation fields, respiratory
gating and gated acquisition simulation.

The phantom is a thorax-like arrangement of ellipsoids: body (0.2), two
lungs (0.02), periodic rib shells (0.5), a spherical tumor (0.3) and a
diaphragm dome, with tumor and diaphragm translated along z by a
phase-dependent sinusoidal offset. Phase 0 is max-exhale by convention.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .dvf import Dvf
from .geometry import ConeBeamGeometry, read_geometry, write_geometry
from .projector import forward_project
from .volume import View, Volume3, centered_volume, read_view, write_view


@dataclass(frozen=True)
class Phantom4D:
    """Parameters of the cyclic 4-D phantom. Lengths in mm, intensities in [0, 1]."""

    n_phases: int = 4
    body_center: tuple = (0.0, 0.0, 0.0)
    body_radii: tuple = (85.0, 65.0, 92.0)
    body_value: float = 0.2
    lung_centers: tuple = ((38.0, 0.0, 5.0), (-38.0, 0.0, 5.0))
    lung_radii: tuple = (26.0, 32.0, 62.0)
    lung_value: float = 0.02
    rib_value: float = 0.5
    rib_period: float = 24.0
    rib_z_range: tuple = (-20.0, 80.0)
    tumor_center: tuple = (38.0, 0.0, 15.0)
    tumor_radius: float = 8.0
    tumor_value: float = 0.3
    tumor_amplitude: float = 6.0
    diaphragm_center: tuple = (38.0, 0.0, -70.0)
    diaphragm_radius: float = 38.0

    def __post_init__(self):
        if self.n_phases < 2:
            raise ValueError("need at least two phases")
        if self.tumor_radius <= 0 or self.diaphragm_radius <= 0:
            raise ValueError("radii must be > 0")

    def phase_offset(self, i: int) -> float:
        """Superior-inferior displacement (mm) of tumor and diaphragm at phase i."""
        return self.tumor_amplitude * math.sin(2.0 * math.pi * i / self.n_phases)

    def phase_of(self, t: float) -> int:
        """Cyclic phase index for a continuous time in breathing-cycle units."""
        return int(math.floor((t % 1.0) * self.n_phases))


def _ellipsoid_mask(xs, ys, zs, center, radii) -> np.ndarray:
    return ((xs - center[0]) ** 2 / radii[0] ** 2
            + (ys - center[1]) ** 2 / radii[1] ** 2
            + (zs - center[2]) ** 2 / radii[2] ** 2) <= 1.0


def _grid_mm(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    origin = [-(d - 1) / 2.0 * s for d, s in zip(dims, spacing)]
    axes = [origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3)]
    return np.meshgrid(*axes, indexing="ij")


def render_phantom(ph: Phantom4D, i: int, dims, spacing) -> Volume3:
    """Rasterize phase i of the phantom onto an isocenter-centered grid."""
    if not (0 <= i < ph.n_phases):
        raise IndexError(f"phase {i} out of range [0, {ph.n_phases})")
    xs, ys, zs = _grid_mm(dims, spacing)
    off = ph.phase_offset(i)

    vol = np.zeros(xs.shape, dtype=np.float64)
    body = _ellipsoid_mask(xs, ys, zs, ph.body_center, ph.body_radii)
    vol[body] = ph.body_value

    lung1 = _ellipsoid_mask(xs, ys, zs, ph.lung_centers[0], ph.lung_radii)
    vol[lung1] = ph.lung_value
    for lc in ph.lung_centers[1:]:
        vol[_ellipsoid_mask(xs, ys, zs, lc, ph.lung_radii)] = ph.lung_value

    # diaphragm: body-tissue dome pushing into the first lung, moving with phase
    dc = (ph.diaphragm_center[0], ph.diaphragm_center[1], ph.diaphragm_center[2] + off)
    dome = ((xs - dc[0]) ** 2 + (ys - dc[1]) ** 2 + (zs - dc[2]) ** 2) <= ph.diaphragm_radius ** 2
    vol[dome & lung1] = ph.body_value

    tc = (ph.tumor_center[0], ph.tumor_center[1], ph.tumor_center[2] + off)
    tumor = ((xs - tc[0]) ** 2 + (ys - tc[1]) ** 2 + (zs - tc[2]) ** 2) <= ph.tumor_radius ** 2
    vol[tumor] = ph.tumor_value

    # rib cage: periodic bands of a thin shell just inside the body surface,
    # kept to the upper thorax so they stay clear of the motion envelope
    rho2 = ((xs - ph.body_center[0]) ** 2 / ph.body_radii[0] ** 2
            + (ys - ph.body_center[1]) ** 2 / ph.body_radii[1] ** 2
            + (zs - ph.body_center[2]) ** 2 / ph.body_radii[2] ** 2)
    shell = (rho2 >= 0.88 ** 2) & (rho2 <= 0.96 ** 2)
    bands = np.sin(math.pi * zs / ph.rib_period) ** 2 > 0.5
    bands &= (zs >= ph.rib_z_range[0]) & (zs <= ph.rib_z_range[1])
    vol[shell & bands] = ph.rib_value

    return centered_volume(dims, spacing).like(vol)


# ---------------------------------------------------------------------------
# ground-truth deformation fields


def _envelope_weight(xs, ys, zs, center, outer_radii, plateau_frac=0.62) -> np.ndarray:
    """1 inside the plateau (outer * plateau_frac), cosine falloff to 0 at the outer ellipsoid."""
    rho = np.sqrt((xs - center[0]) ** 2 / outer_radii[0] ** 2
                  + (ys - center[1]) ** 2 / outer_radii[1] ** 2
                  + (zs - center[2]) ** 2 / outer_radii[2] ** 2)
    q = plateau_frac
    w = np.zeros(rho.shape)
    w[rho <= q] = 1.0
    ring = (rho > q) & (rho < 1.0)
    w[ring] = 0.5 * (1.0 + np.cos(math.pi * (rho[ring] - q) / (1.0 - q)))
    return w


def motion_envelope_weight(ph: Phantom4D, dims, spacing) -> np.ndarray:
    """Combined motion-envelope weight field in [0, 1] on the given grid."""
    xs, ys, zs = _grid_mm(dims, spacing)
    a = ph.tumor_amplitude
    # tumor envelope: plateau covers the tumor at every phase
    t_pl = ph.tumor_radius + a + 2.0
    w_t = _envelope_weight(xs, ys, zs, ph.tumor_center, (t_pl / 0.65,) * 3,
                           plateau_frac=0.65)
    # diaphragm envelope: plateau covers the dome cap visible inside the lung
    dc = ph.diaphragm_center
    cap_z = -42.0
    w_d = _envelope_weight(xs, ys, zs, (dc[0], dc[1], cap_z), (30.0, 34.0, 32.0))
    return np.clip(w_t + w_d, 0.0, 1.0)


def ground_truth_dvf(ph: Phantom4D, i: int, j: int, dims, spacing) -> Dvf:
    """Analytic displacement field mapping phase-i anatomy onto phase-j anatomy.

    In voxel units; pulling phase i with this field reproduces phase j, so the
    z-displacement inside the plateau is offset_i - offset_j.
    """
    for p in (i, j):
        if not (0 <= p < ph.n_phases):
            raise IndexError(f"phase {p} out of range [0, {ph.n_phases})")
    dims = tuple(int(d) for d in dims)
    disp = np.zeros(dims + (3,), dtype=np.float64)
    if i != j:
        w = motion_envelope_weight(ph, dims, spacing)
        dz_mm = ph.phase_offset(i) - ph.phase_offset(j)
        disp[..., 2] = w * (dz_mm / float(spacing[2]))
    return Dvf(disp)


# ---------------------------------------------------------------------------
# respiratory gating


@dataclass
class PhaseBinning:
    """View-to-phase assignment and the resulting per-phase view bins."""

    phase_of_view: list[int]
    bins: list[list[int]]
    degenerate: bool = False

    def __post_init__(self):
        seen = sorted(k for b in self.bins for k in b)
        if seen != list(range(len(self.phase_of_view))):
            raise ValueError("bins must partition the view index set")
        for i, b in enumerate(self.bins):
            for k in b:
                if self.phase_of_view[k] != i:
                    raise ValueError("bins inconsistent with phase_of_view")

    @property
    def n_phases(self) -> int:
        return len(self.bins)


def breathing_phase_assignment(n_phases: int, n_views: int, period_views: float,
                               phase_shift: float = 0.0,
                               amplitude: float = 1.0) -> PhaseBinning:
    """Amplitude-based binning of a sinusoidal breathing surrogate.

    The surrogate amplitude * sin(2*pi*k/period + shift) is normalized and split
    into n_phases//2 + 1 amplitude levels; intermediate levels are separated
    into inhale and exhale phases by the signal slope. Dwelling at the signal
    extremes makes the extreme bins larger than the intermediate ones.
    """
    if n_phases < 1:
        raise ValueError("n_phases must be >= 1")
    if period_views <= n_phases:
        raise ValueError("period_views must exceed n_phases")
    ks = np.arange(n_views, dtype=np.float64)
    sig = amplitude * np.sin(2.0 * math.pi * ks / period_views + phase_shift)
    lo, hi = float(sig.min()), float(sig.max())
    if hi - lo < 1e-12:
        phases = [0] * n_views
        bins = [list(range(n_views))] + [[] for _ in range(n_phases - 1)]
        return PhaseBinning(phases, bins, degenerate=True)
    u = (sig - lo) / (hi - lo)
    inhaling = np.cos(2.0 * math.pi * ks / period_views + phase_shift) * amplitude >= 0.0
    n_levels = n_phases // 2 + 1
    level = np.minimum((u * n_levels).astype(np.int64), n_levels - 1)
    phases = np.where(inhaling, level, (n_phases - level) % n_phases)
    bins = [[] for _ in range(n_phases)]
    for k, p in enumerate(phases):
        bins[int(p)].append(k)
    return PhaseBinning([int(p) for p in phases], bins)


def write_binning(binning: PhaseBinning, path) -> None:
    with open(path, "w") as f:
        json.dump({"phase_of_view": binning.phase_of_view,
                   "bins": binning.bins,
                   "degenerate": binning.degenerate}, f)


def read_binning(path) -> PhaseBinning:
    with open(path) as f:
        doc = json.load(f)
    return PhaseBinning(doc["phase_of_view"], doc["bins"], doc.get("degenerate", False))


# ---------------------------------------------------------------------------
# acquisition simulation


@dataclass
class AcquisitionSet:
    """A gated acquisition: geometry, one view per angle, and the phase binning."""

    geom: ConeBeamGeometry
    views: list[View]
    binning: PhaseBinning

    def __post_init__(self):
        if len(self.views) != self.geom.n_views:
            raise ValueError("view count must match the angle list")
        if len(self.binning.phase_of_view) != self.geom.n_views:
            raise ValueError("binning length must match the angle list")


def simulate_acquisition(ph: Phantom4D, geom: ConeBeamGeometry, binning: PhaseBinning,
                         S: int, noise_sigma: float = 0.0, noise_seed: int = 0,
                         dims=(64, 64, 64), spacing=(3.0, 3.0, 3.0)) -> AcquisitionSet:
    """Gated DRR simulation: each view projects the phase its angle was binned to.

    Noise is additive Gaussian on the line integrals, drawn from a per-view
    seeded generator so parallel and sequential runs agree byte-for-byte.
    """
    if len(binning.phase_of_view) != geom.n_views:
        raise ValueError("binning length must match the angle list")
    phases = {}
    views = []
    for k in range(geom.n_views):
        i = binning.phase_of_view[k]
        if i not in phases:
            phases[i] = render_phantom(ph, i, dims, spacing)
        view = forward_project(phases[i], geom, k, S)
        if noise_sigma > 0.0:
            rng = np.random.default_rng([int(noise_seed), k])
            view = View(view.data + noise_sigma * rng.standard_normal(view.data.shape))
        views.append(view)
    return AcquisitionSet(geom, views, binning)


def save_acquisition(acq: AcquisitionSet, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    write_geometry(acq.geom, os.path.join(dirpath, "geometry.json"))
    write_binning(acq.binning, os.path.join(dirpath, "binning.json"))
    for k, v in enumerate(acq.views):
        write_view(v, os.path.join(dirpath, f"view_{k:04d}.vol"))


def load_acquisition(dirpath) -> AcquisitionSet:
    geom = read_geometry(os.path.join(dirpath, "geometry.json"))
    binning = read_binning(os.path.join(dirpath, "binning.json"))
    views = [read_view(os.path.join(dirpath, f"view_{k:04d}.vol"))
             for k in range(geom.n_views)]
    return AcquisitionSet(geom, views, binning)
