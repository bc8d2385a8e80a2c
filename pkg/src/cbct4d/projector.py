"""Cone-beam projection via ray marching.

The ray-path transform re-represents a volume as per-detector-pixel sample
stacks R of shape (W, H, S) whose s-sums reproduce the projection exactly.
Samples are pre-scaled by the per-pixel step length, so the s-sum is a
physical line integral (mm * value units).

Per-step contributions are rounded to float32 before being accumulated in
float64. This makes the forward projection, the stack sum, patch
reassembly and ray-dimension downsampling agree bit-for-bit: every path
computes the same exact sum of the same float32 addends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

from .geometry import ConeBeamGeometry, detector_axes, source_position
from .volume import RayVolume, View, Volume3


@dataclass(frozen=True)
class PatchSpec:
    """Pixel rectangle [w0, w0+pw) x [h0, h0+ph) on the detector plane."""

    w0: int
    h0: int
    pw: int
    ph: int

    def __post_init__(self):
        if self.pw < 1 or self.ph < 1:
            raise ValueError("patch extents must be >= 1")
        if self.w0 < 0 or self.h0 < 0:
            raise ValueError("patch origin must be nonnegative")


# ---------------------------------------------------------------------------
# ray setup


def pixel_rays(geom: ConeBeamGeometry, k: int, vol: Volume3):
    """Rays for every detector pixel of view k, clipped to the volume bbox.

    Returns (src, dirs, t0, t1) where dirs/t0/t1 are flat over pixels in
    w-fastest order (pixel index = w + W*h). Missed rays have t1 < t0.
    The result is cached per (geometry, view, grid) and must not be mutated.
    """
    return _pixel_rays_cached(geom, k, vol.dims, vol.spacing, vol.origin)


@lru_cache(maxsize=256)
def _pixel_rays_cached(geom, k, dims, spacing, origin):
    sp = np.asarray(spacing, dtype=np.float64)
    og = np.asarray(origin, dtype=np.float64)
    bbox_min = og - 0.5 * sp
    bbox_max = og + (np.asarray(dims, dtype=np.float64) - 0.5) * sp
    src = source_position(geom, k)
    center, u_hat, v_hat = detector_axes(geom, k)
    w = np.arange(geom.det_w, dtype=np.float64)
    h = np.arange(geom.det_h, dtype=np.float64)
    u = (w + 0.5 - geom.det_w / 2.0) * geom.det_spacing_u + geom.det_offset_u
    v = (h + 0.5 - geom.det_h / 2.0) * geom.det_spacing_v + geom.det_offset_v
    # w-fastest pixel ordering
    uu = np.tile(u, geom.det_h)
    vv = np.repeat(v, geom.det_w)
    pix = center[None, :] + uu[:, None] * u_hat[None, :] + vv[:, None] * v_hat[None, :]
    dirs = pix - src[None, :]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    bmin, bmax = bbox_min, bbox_max
    t0 = np.zeros(len(dirs))
    t1 = np.full(len(dirs), np.inf)
    miss = np.zeros(len(dirs), dtype=bool)
    for ax in range(3):
        d = dirs[:, ax]
        zero = d == 0.0
        miss |= zero & ~((bmin[ax] <= src[ax]) & (src[ax] <= bmax[ax]))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (bmin[ax] - src[ax]) / d
            tb = (bmax[ax] - src[ax]) / d
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        t0 = np.where(zero, t0, np.maximum(t0, lo))
        t1 = np.where(zero, t1, np.minimum(t1, hi))
    miss |= t1 < t0
    t0[miss] = 0.0
    t1[miss] = -1.0
    return src, dirs, t0, t1


@njit(cache=True, nogil=True)
def _march_sum(vol, ox, oy, oz, sx, sy, sz, src, dirs, t0, t1, S, out):
    X, Y, Z = vol.shape
    n = dirs.shape[0]
    for i in range(n):
        if t1[i] < t0[i]:
            out[i] = 0.0
            continue
        delta = (t1[i] - t0[i]) / S
        acc = 0.0
        for s in range(S):
            t = t0[i] + (s + 0.5) * delta
            fx = (src[0] + dirs[i, 0] * t - ox) / sx
            fy = (src[1] + dirs[i, 1] * t - oy) / sy
            fz = (src[2] + dirs[i, 2] * t - oz) / sz
            ix = int(math.ceil(fx - 0.5))
            iy = int(math.ceil(fy - 0.5))
            iz = int(math.ceil(fz - 0.5))
            v = 0.0
            if 0 <= ix < X and 0 <= iy < Y and 0 <= iz < Z:
                v = vol[ix, iy, iz]
            acc += np.float32(delta * v)
        out[i] = acc


@njit(cache=True, nogil=True)
def _march_record(vol, ox, oy, oz, sx, sy, sz, src, dirs, t0, t1, S, out):
    X, Y, Z = vol.shape
    n = dirs.shape[0]
    for i in range(n):
        if t1[i] < t0[i]:
            continue
        delta = (t1[i] - t0[i]) / S
        for s in range(S):
            t = t0[i] + (s + 0.5) * delta
            fx = (src[0] + dirs[i, 0] * t - ox) / sx
            fy = (src[1] + dirs[i, 1] * t - oy) / sy
            fz = (src[2] + dirs[i, 2] * t - oz) / sz
            ix = int(math.ceil(fx - 0.5))
            iy = int(math.ceil(fy - 0.5))
            iz = int(math.ceil(fz - 0.5))
            v = 0.0
            if 0 <= ix < X and 0 <= iy < Y and 0 <= iz < Z:
                v = vol[ix, iy, iz]
            out[i, s] = np.float32(delta * v)


@njit(cache=True, nogil=True)
def _march_scatter(vals, vol, ox, oy, oz, sx, sy, sz, src, dirs, t0, t1, S):
    X, Y, Z = vol.shape
    n = dirs.shape[0]
    for i in range(n):
        if t1[i] < t0[i]:
            continue
        delta = (t1[i] - t0[i]) / S
        contrib = delta * vals[i]
        for s in range(S):
            t = t0[i] + (s + 0.5) * delta
            fx = (src[0] + dirs[i, 0] * t - ox) / sx
            fy = (src[1] + dirs[i, 1] * t - oy) / sy
            fz = (src[2] + dirs[i, 2] * t - oz) / sz
            ix = int(math.ceil(fx - 0.5))
            iy = int(math.ceil(fy - 0.5))
            iz = int(math.ceil(fz - 0.5))
            if 0 <= ix < X and 0 <= iy < Y and 0 <= iz < Z:
                vol[ix, iy, iz] += contrib


def _kernel_args(vol: Volume3, geom: ConeBeamGeometry, k: int):
    src, dirs, t0, t1 = pixel_rays(geom, k, vol)
    ox, oy, oz = vol.origin
    sx, sy, sz = vol.spacing
    data = np.ascontiguousarray(vol.data, dtype=np.float64)
    return data, ox, oy, oz, sx, sy, sz, src, dirs, t0, t1


def _check_steps(S: int) -> int:
    S = int(S)
    if S < 1:
        raise ValueError("step count S must be >= 1")
    return S


def default_step_count(dims) -> int:
    """2 * max(dims) rounded up to a power of two."""
    return 1 << int(math.ceil(math.log2(2 * max(dims))))


def rpt_transform(vol: Volume3, geom: ConeBeamGeometry, k: int, S: int) -> RayVolume:
    """Transform the volume into per-pixel ray stacks for view k.

    Rays missing the volume record all-zero stacks; otherwise the in-volume
    interval is divided into S equal steps and entry s holds
    step * nearest-sample at the step midpoint, rounded to float32.
    """
    S = _check_steps(S)
    data, ox, oy, oz, sx, sy, sz, src, dirs, t0, t1 = _kernel_args(vol, geom, k)
    out = np.zeros((dirs.shape[0], S), dtype=np.float32)
    _march_record(data, ox, oy, oz, sx, sy, sz, src, dirs, t0, t1, S, out)
    r = out.reshape(geom.det_h, geom.det_w, S).transpose(1, 0, 2)
    hit = t1 >= t0
    if np.any(hit):
        step_len = float(np.mean((t1[hit] - t0[hit]) / S))
    else:
        step_len = float(np.linalg.norm(vol.bbox_max - vol.bbox_min) / S)
    return RayVolume(np.ascontiguousarray(r), max(step_len, np.finfo(np.float32).tiny))


def project_from_rpt(r: RayVolume) -> View:
    """Sum the ray stacks over s with 64-bit accumulation."""
    w, h, s = r.dims
    acc = np.zeros((w, h), dtype=np.float64)
    for i in range(s):
        acc += r.data[:, :, i]
    return View(acc)


def forward_project(vol: Volume3, geom: ConeBeamGeometry, k: int, S: int) -> View:
    """Projection of the volume at view k, without materializing the ray stacks.

    Bit-identical to project_from_rpt(rpt_transform(vol, geom, k, S)).
    """
    S = _check_steps(S)
    data, ox, oy, oz, sx, sy, sz, src, dirs, t0, t1 = _kernel_args(vol, geom, k)
    out = np.zeros(dirs.shape[0], dtype=np.float64)
    _march_sum(data, ox, oy, oz, sx, sy, sz, src, dirs, t0, t1, S, out)
    return View(out.reshape(geom.det_h, geom.det_w).T.copy())


def backproject(view: View, geom: ConeBeamGeometry, k: int, S: int,
                dims, spacing, origin) -> Volume3:
    """Exact linear adjoint of forward_project onto the given target grid."""
    S = _check_steps(S)
    target = Volume3(np.zeros(tuple(int(d) for d in dims)), spacing, origin)
    src, dirs, t0, t1 = pixel_rays(geom, k, target)
    vals = np.ascontiguousarray(view.data.T, dtype=np.float64).ravel()
    ox, oy, oz = target.origin
    sx, sy, sz = target.spacing
    _march_scatter(vals, target.data, ox, oy, oz, sx, sy, sz, src, dirs, t0, t1, S)
    return target


# ---------------------------------------------------------------------------
# patch decomposition


def _validate_tiling(patches: list[PatchSpec], det_w: int, det_h: int) -> None:
    cover = np.zeros((det_w, det_h), dtype=np.int32)
    for p in patches:
        if p.w0 + p.pw > det_w or p.h0 + p.ph > det_h:
            raise ValueError(f"patch {p} exceeds detector ({det_w}, {det_h})")
        cover[p.w0:p.w0 + p.pw, p.h0:p.h0 + p.ph] += 1
    if np.any(cover > 1):
        raise ValueError("patches overlap")
    if np.any(cover == 0):
        raise ValueError("patches do not cover the detector")


def split_patches(r: RayVolume, patches: list[PatchSpec]) -> list[RayVolume]:
    """Cut the ray stacks into detector patches; patches must tile (W, H) exactly."""
    w, h, _ = r.dims
    _validate_tiling(patches, w, h)
    return [RayVolume(r.data[p.w0:p.w0 + p.pw, p.h0:p.h0 + p.ph, :].copy(), r.step_len)
            for p in patches]


def merge_patches(patches: list[PatchSpec], parts: list[RayVolume],
                  det_w: int, det_h: int) -> RayVolume:
    """Reassemble patch ray stacks into the full (W, H, S) representation."""
    if len(patches) != len(parts):
        raise ValueError("patch spec and part counts differ")
    _validate_tiling(patches, det_w, det_h)
    s = parts[0].dims[2]
    out = np.zeros((det_w, det_h, s), dtype=parts[0].data.dtype)
    for p, part in zip(patches, parts):
        if part.dims != (p.pw, p.ph, s):
            raise ValueError(f"part dims {part.dims} do not match spec {p}")
        out[p.w0:p.w0 + p.pw, p.h0:p.h0 + p.ph, :] = part.data
    return RayVolume(out, parts[0].step_len)


def regular_tiling(det_w: int, det_h: int, pw: int, ph: int) -> list[PatchSpec]:
    """Tile the detector with pw x ph patches plus edge remainders."""
    out = []
    for h0 in range(0, det_h, ph):
        for w0 in range(0, det_w, pw):
            out.append(PatchSpec(w0, h0, min(pw, det_w - w0), min(ph, det_h - h0)))
    return out


def downsample_rays(r: RayVolume, k: int) -> RayVolume:
    """Locally sum k consecutive ray samples; projections are invariant."""
    k = int(k)
    if k < 1:
        raise ValueError("downsampling factor must be >= 1")
    if k == 1:
        return RayVolume(r.data.copy(), r.step_len)
    w, h, s = r.dims
    if s % k != 0:
        raise ValueError(f"S={s} not divisible by k={k}")
    out = r.data.reshape(w, h, s // k, k).sum(axis=3, dtype=np.float64)
    return RayVolume(out, r.step_len * k)
