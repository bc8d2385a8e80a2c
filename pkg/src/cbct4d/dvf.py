"""Deformation vector fields: backward warping, its exact adjoint, and a
multi-resolution demons registration for estimating inter-phase fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

from .volume import Volume3


@dataclass
class Dvf:
    """Per-voxel displacement field in voxel units; `disp` has shape (X, Y, Z, 3)."""

    disp: np.ndarray

    def __post_init__(self):
        self.disp = np.asarray(self.disp, dtype=np.float64)
        if self.disp.ndim != 4 or self.disp.shape[3] != 3:
            raise ValueError("displacement must have shape (X, Y, Z, 3)")
        if not np.all(np.isfinite(self.disp)):
            raise ValueError("displacement contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.disp.shape[:3]


def dvf_from_mm(disp_mm: np.ndarray, spacing) -> Dvf:
    """Convert a millimeter displacement field to voxel units."""
    return Dvf(disp_mm / np.asarray(spacing, dtype=np.float64))


def _check_dims(vol: Volume3, d: Dvf) -> None:
    if vol.dims != d.dims:
        raise ValueError(f"volume dims {vol.dims} do not match field dims {d.dims}")


@njit(cache=True, nogil=True)
def _warp_pull(src, disp, out):
    X, Y, Z = src.shape
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                fx = x + disp[x, y, z, 0]
                fy = y + disp[x, y, z, 1]
                fz = z + disp[x, y, z, 2]
                ix0 = int(np.floor(fx))
                iy0 = int(np.floor(fy))
                iz0 = int(np.floor(fz))
                wx = fx - ix0
                wy = fy - iy0
                wz = fz - iz0
                acc = 0.0
                for dx in range(2):
                    ix = ix0 + dx
                    if ix < 0 or ix >= X:
                        continue
                    ax = wx if dx else 1.0 - wx
                    for dy in range(2):
                        iy = iy0 + dy
                        if iy < 0 or iy >= Y:
                            continue
                        ay = wy if dy else 1.0 - wy
                        for dz in range(2):
                            iz = iz0 + dz
                            if iz < 0 or iz >= Z:
                                continue
                            az = wz if dz else 1.0 - wz
                            acc += ax * ay * az * src[ix, iy, iz]
                out[x, y, z] = acc


@njit(cache=True, nogil=True)
def _warp_splat(src, disp, out):
    X, Y, Z = src.shape
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                v = src[x, y, z]
                fx = x + disp[x, y, z, 0]
                fy = y + disp[x, y, z, 1]
                fz = z + disp[x, y, z, 2]
                ix0 = int(np.floor(fx))
                iy0 = int(np.floor(fy))
                iz0 = int(np.floor(fz))
                wx = fx - ix0
                wy = fy - iy0
                wz = fz - iz0
                for dx in range(2):
                    ix = ix0 + dx
                    if ix < 0 or ix >= X:
                        continue
                    ax = wx if dx else 1.0 - wx
                    for dy in range(2):
                        iy = iy0 + dy
                        if iy < 0 or iy >= Y:
                            continue
                        ay = wy if dy else 1.0 - wy
                        for dz in range(2):
                            iz = iz0 + dz
                            if iz < 0 or iz >= Z:
                                continue
                            az = wz if dz else 1.0 - wz
                            out[ix, iy, iz] += ax * ay * az * v


def warp(vol: Volume3, d: Dvf) -> Volume3:
    """Backward (pull) warp: out(x) = trilinear(vol, x + d(x)), zero outside support."""
    _check_dims(vol, d)
    out = np.zeros(vol.dims, dtype=np.float64)
    _warp_pull(np.ascontiguousarray(vol.data, dtype=np.float64),
               np.ascontiguousarray(d.disp), out)
    return vol.like(out)


def warp_adjoint(vol: Volume3, d: Dvf) -> Volume3:
    """Exact linear adjoint of warp: splat each voxel to its 8 source corners."""
    _check_dims(vol, d)
    out = np.zeros(vol.dims, dtype=np.float64)
    _warp_splat(np.ascontiguousarray(vol.data, dtype=np.float64),
                np.ascontiguousarray(d.disp), out)
    return vol.like(out)


# ---------------------------------------------------------------------------
# demons registration


def _downsample2(a: np.ndarray) -> np.ndarray:
    return ndimage.zoom(a, 0.5, order=1, prefilter=False, grid_mode=True, mode="nearest")


def _upsample_field(disp: np.ndarray, shape) -> np.ndarray:
    out = np.empty(tuple(shape) + (3,), dtype=np.float64)
    for c in range(3):
        scale = np.asarray(shape, dtype=np.float64) / np.asarray(disp.shape[:3])
        comp = ndimage.zoom(disp[..., c], tuple(scale), order=1,
                            prefilter=False, grid_mode=True, mode="nearest")
        out[..., c] = comp * scale[c]
    return out


def demons_register(moving: Volume3, fixed: Volume3, levels: int = 3,
                    iters: int = 50, sigma_fluid: float = 1.0,
                    sigma_diffusion: float = 1.0) -> Dvf:
    """Multi-resolution Thirion demons; returns the field pulling `moving` onto `fixed`.

    Per iteration the demons force (m∘d - f) grad(f) / (|grad f|^2 + (m∘d - f)^2)
    is Gaussian-smoothed (sigma_fluid) and accumulated; the field itself is
    smoothed with sigma_diffusion. Fully deterministic.
    """
    if moving.dims != fixed.dims:
        raise ValueError("moving and fixed dims differ")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if 2 ** (levels - 1) > min(fixed.dims):
        raise ValueError("too many pyramid levels for these dims")

    pyramid = [(np.asarray(moving.data, float), np.asarray(fixed.data, float))]
    for _ in range(levels - 1):
        m, f = pyramid[-1]
        pyramid.append((_downsample2(m), _downsample2(f)))

    disp = np.zeros(pyramid[-1][0].shape + (3,), dtype=np.float64)
    for lvl in range(levels - 1, -1, -1):
        m, f = pyramid[lvl]
        if disp.shape[:3] != m.shape:
            disp = _upsample_field(disp, m.shape)
        grad_f = np.stack(np.gradient(f), axis=-1)
        grad_norm2 = np.sum(grad_f ** 2, axis=-1)
        vol_m = Volume3(m, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        for _ in range(iters):
            warped = warp(vol_m, Dvf(disp)).data
            diff = warped - f
            denom = grad_norm2 + diff ** 2
            safe = np.maximum(denom, 1e-12)
            force = -diff[..., None] * grad_f / safe[..., None]
            force[denom < 1e-12] = 0.0
            for c in range(3):
                force[..., c] = ndimage.gaussian_filter(force[..., c], sigma_fluid)
            disp = disp + force
            for c in range(3):
                disp[..., c] = ndimage.gaussian_filter(disp[..., c], sigma_diffusion)
    return Dvf(disp)


# ---------------------------------------------------------------------------
# file I/O: three component payloads plus one shared sidecar


_COMPONENTS = ("dx", "dy", "dz")


def write_dvf(d: Dvf, basepath) -> None:
    base = str(basepath)
    meta = {"dims": list(d.dims), "units": "voxel"}
    for c, name in enumerate(_COMPONENTS):
        flat = d.disp[..., c].ravel(order="F")
        with open(f"{base}.{name}.vol", "wb") as fh:
            fh.write(flat.astype("<f4").tobytes())
    import json
    with open(f"{base}.dvf.json", "w") as fh:
        json.dump(meta, fh)


def read_dvf(basepath) -> Dvf:
    import json
    base = str(basepath)
    with open(f"{base}.dvf.json") as fh:
        meta = json.load(fh)
    dims = tuple(int(x) for x in meta["dims"])
    n = int(np.prod(dims))
    disp = np.empty(dims + (3,), dtype=np.float64)
    for c, name in enumerate(_COMPONENTS):
        payload = np.fromfile(f"{base}.{name}.vol", dtype="<f4")
        if payload.size != n:
            raise ValueError(f"{base}.{name}.vol: payload size mismatch")
        disp[..., c] = payload.reshape(dims, order="F")
    return Dvf(disp)
