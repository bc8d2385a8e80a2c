"""Cone-beam acquisition geometry: source/detector placement and per-pixel rays."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SAD = 1000.0
DEFAULT_SDD = 1500.0
DEFAULT_NUM_VIEWS = 680


def full_scan_angles(n_views: int = DEFAULT_NUM_VIEWS, start: float = 0.0) -> tuple[float, ...]:
    """Evenly spaced gantry angles over one full rotation, endpoint excluded."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    return tuple(start + 2.0 * math.pi * k / n_views for k in range(n_views))


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Circular cone-beam geometry.

    Rotation axis is z; the gantry rotates in the x-y plane. At angle 0 the
    source sits on the +x axis. Detector u runs tangentially, v along z.
    All lengths in mm, angles in radians.
    """

    sad: float = DEFAULT_SAD
    sdd: float = DEFAULT_SDD
    det_w: int = 256
    det_h: int = 192
    det_spacing_u: float = 1.55
    det_spacing_v: float = 1.55
    det_offset_u: float = 0.0
    det_offset_v: float = 0.0
    angles: tuple[float, ...] = field(default_factory=full_scan_angles)

    def __post_init__(self):
        if not (self.sad > 0 and self.sdd > self.sad):
            raise ValueError("require sad > 0 and sdd > sad")
        if self.det_w < 1 or self.det_h < 1:
            raise ValueError("detector dims must be >= 1")
        if self.det_spacing_u <= 0 or self.det_spacing_v <= 0:
            raise ValueError("detector spacings must be > 0")
        if len(self.angles) < 1:
            raise ValueError("need at least one angle")
        a = np.asarray(self.angles, dtype=np.float64)
        if len(a) > 1:
            if not np.all(np.diff(a) > 0):
                raise ValueError("angles must be strictly increasing")
            if a[-1] - a[0] >= 2.0 * math.pi:
                raise ValueError("angles must span at most one rotation")
        object.__setattr__(self, "angles", tuple(float(x) for x in a))

    @property
    def n_views(self) -> int:
        return len(self.angles)


@dataclass(frozen=True)
class Ray:
    """A source-to-pixel ray with its (possibly empty) volume-bbox interval."""

    origin: np.ndarray
    direction: np.ndarray
    t_entry: float
    t_exit: float

    @property
    def hits(self) -> bool:
        return self.t_exit >= self.t_entry

    def point(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def _check_view_index(geom: ConeBeamGeometry, k: int) -> None:
    if not (0 <= k < geom.n_views):
        raise IndexError(f"view index {k} out of range [0, {geom.n_views})")


def source_position(geom: ConeBeamGeometry, k: int) -> np.ndarray:
    """Source position for view k; angle 0 places the source on the +x axis."""
    _check_view_index(geom, k)
    a = geom.angles[k]
    return np.array([geom.sad * math.cos(a), geom.sad * math.sin(a), 0.0])


def detector_axes(geom: ConeBeamGeometry, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(detector center, u axis, v axis) for view k; the center excludes offsets."""
    _check_view_index(geom, k)
    a = geom.angles[k]
    c, s = math.cos(a), math.sin(a)
    center = np.array([(geom.sad - geom.sdd) * c, (geom.sad - geom.sdd) * s, 0.0])
    u_hat = np.array([-s, c, 0.0])
    v_hat = np.array([0.0, 0.0, 1.0])
    return center, u_hat, v_hat


def detector_pixel_position(geom: ConeBeamGeometry, k: int, w: int, h: int) -> np.ndarray:
    """Center of detector pixel (w, h) in mm, including detector offsets."""
    if not (0 <= w < geom.det_w and 0 <= h < geom.det_h):
        raise IndexError(f"pixel ({w},{h}) out of range")
    center, u_hat, v_hat = detector_axes(geom, k)
    u = (w + 0.5 - geom.det_w / 2.0) * geom.det_spacing_u + geom.det_offset_u
    v = (h + 0.5 - geom.det_h / 2.0) * geom.det_spacing_v + geom.det_offset_v
    return center + u * u_hat + v * v_hat


def slab_clip(origin: np.ndarray, direction: np.ndarray,
              bbox_min: np.ndarray, bbox_max: np.ndarray) -> tuple[float, float]:
    """Clip a ray against an axis-aligned box; (0.0, -1.0) when it misses.

    The interval is intersected with t >= 0 so only the forward half-line counts.
    """
    t0, t1 = 0.0, math.inf
    for ax in range(3):
        d = direction[ax]
        if d == 0.0:
            if not (bbox_min[ax] <= origin[ax] <= bbox_max[ax]):
                return 0.0, -1.0
            continue
        ta = (bbox_min[ax] - origin[ax]) / d
        tb = (bbox_max[ax] - origin[ax]) / d
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    if t1 < t0:
        return 0.0, -1.0
    return t0, t1


def ray_for_pixel(geom: ConeBeamGeometry, k: int, w: int, h: int,
                  bbox_min, bbox_max) -> Ray:
    """Ray from the source through pixel (w, h), clipped to the volume bbox."""
    src = source_position(geom, k)
    pix = detector_pixel_position(geom, k, w, h)
    d = pix - src
    d = d / np.linalg.norm(d)
    t0, t1 = slab_clip(src, d, np.asarray(bbox_min, float), np.asarray(bbox_max, float))
    return Ray(origin=src, direction=d, t_entry=t0, t_exit=t1)


def write_geometry(geom: ConeBeamGeometry, path) -> None:
    doc = {
        "sad": geom.sad,
        "sdd": geom.sdd,
        "det_w": geom.det_w,
        "det_h": geom.det_h,
        "det_spacing_u": geom.det_spacing_u,
        "det_spacing_v": geom.det_spacing_v,
        "det_offset_u": geom.det_offset_u,
        "det_offset_v": geom.det_offset_v,
        "angles": list(geom.angles),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def read_geometry(path) -> ConeBeamGeometry:
    with open(path) as f:
        doc = json.load(f)
    doc["angles"] = tuple(doc["angles"])
    return ConeBeamGeometry(**doc)
