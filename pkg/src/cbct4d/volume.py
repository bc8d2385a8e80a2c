"""Dense 3D grids, detector views and ray volumes, with sampling and raw file I/O.

On-disk format: `.vol` holds a raw little-endian float32 payload, the
JSON sidecar `<name>.vol.json` records dims/spacing/origin. Flat ordering
is x-fastest for volumes, w-fastest for views, s-fastest (then w, then h)
for ray volumes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Volume3:
    """Scalar 3D grid. `data` has shape (X, Y, Z); origin is the center of voxel (0,0,0)."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError("volume data must be a 3D array with all dims >= 1")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be > 0")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def bbox_min(self) -> np.ndarray:
        return np.asarray(self.origin) - 0.5 * np.asarray(self.spacing)

    @property
    def bbox_max(self) -> np.ndarray:
        d = np.asarray(self.dims, dtype=float)
        return np.asarray(self.origin) + (d - 0.5) * np.asarray(self.spacing)

    def like(self, data: np.ndarray) -> "Volume3":
        return Volume3(data, self.spacing, self.origin)


def centered_volume(dims, spacing, fill: float = 0.0, dtype=np.float64) -> Volume3:
    """Zero (or constant) volume whose grid is centered on the isocenter."""
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(-(d - 1) / 2.0 * s for d, s in zip(dims, spacing))
    return Volume3(np.full(dims, fill, dtype=dtype), spacing, origin)


@dataclass
class View:
    """One detector image, shape (W, H)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError("view data must be 2D")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("view contains non-finite values")

    @property
    def dims(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class RayVolume:
    """Per-pixel ray sample stacks, shape (W, H, S).

    Entries are step-length-scaled volume samples, so summing over s yields
    a line integral. `step_len` records the mean in-volume step for diagnostics.
    """

    data: np.ndarray
    step_len: float

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError("ray volume data must be 3D (W, H, S)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("ray volume contains non-finite values")
        self.step_len = float(self.step_len)
        if self.step_len <= 0:
            raise ValueError("step_len must be > 0")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# sampling


def _nearest_index(f: np.ndarray) -> np.ndarray:
    # round-half-down per axis: ties go to the lower index
    return np.ceil(f - 0.5).astype(np.int64)


def sample_nearest(vol: Volume3, p) -> float:
    """Value of the voxel center nearest to p (mm); 0 outside the volume support."""
    f = (np.asarray(p, dtype=np.float64) - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    idx = _nearest_index(f)
    if np.any(idx < 0) or np.any(idx >= np.asarray(vol.dims)):
        return 0.0
    return float(vol.data[idx[0], idx[1], idx[2]])


def sample_nearest_many(vol: Volume3, pts: np.ndarray) -> np.ndarray:
    """Vectorized nearest sampling of an (n, 3) array of mm points."""
    f = (np.asarray(pts, dtype=np.float64) - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    idx = _nearest_index(f)
    ok = np.all((idx >= 0) & (idx < np.asarray(vol.dims)), axis=1)
    out = np.zeros(len(pts), dtype=np.float64)
    ii = idx[ok]
    out[ok] = vol.data[ii[:, 0], ii[:, 1], ii[:, 2]]
    return out


def sample_trilinear(vol: Volume3, p) -> float:
    """Trilinear interpolation at p (mm); zero contribution outside support."""
    f = (np.asarray(p, dtype=np.float64) - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    i0 = np.floor(f).astype(np.int64)
    w = f - i0
    acc = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix, iy, iz = i0[0] + dx, i0[1] + dy, i0[2] + dz
                if 0 <= ix < vol.dims[0] and 0 <= iy < vol.dims[1] and 0 <= iz < vol.dims[2]:
                    wt = ((w[0] if dx else 1 - w[0])
                          * (w[1] if dy else 1 - w[1])
                          * (w[2] if dz else 1 - w[2]))
                    acc += wt * float(vol.data[ix, iy, iz])
    return acc


# ---------------------------------------------------------------------------
# file I/O


def _sidecar_path(path: str) -> str:
    return str(path) + ".json"


def _write_raw(path: str, flat_f32: np.ndarray, sidecar: dict) -> None:
    with open(path, "wb") as f:
        f.write(flat_f32.astype("<f4").tobytes())
    with open(_sidecar_path(path), "w") as f:
        json.dump(sidecar, f)


def _read_raw(path: str) -> tuple[np.ndarray, dict]:
    sc = _sidecar_path(path)
    if not os.path.exists(sc):
        raise ValueError(f"missing sidecar {sc}")
    try:
        with open(sc) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"ill-formed sidecar {sc}: {e}") from e
    if "dims" not in meta:
        raise ValueError(f"sidecar {sc} lacks 'dims'")
    n = int(np.prod(meta["dims"]))
    payload = np.fromfile(path, dtype="<f4")
    if payload.size != n:
        raise ValueError(f"{path}: payload has {payload.size} values, dims imply {n}")
    return payload, meta


def write_volume(vol: Volume3, path) -> None:
    _write_raw(str(path), vol.data.ravel(order="F"),
               {"dims": list(vol.dims), "spacing": list(vol.spacing), "origin": list(vol.origin)})


def read_volume(path) -> Volume3:
    payload, meta = _read_raw(str(path))
    for key in ("spacing", "origin"):
        if key not in meta:
            raise ValueError(f"volume sidecar lacks '{key}'")
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3:
        raise ValueError("volume sidecar dims must have length 3")
    data = payload.reshape(dims, order="F").astype(np.float64)
    return Volume3(data, tuple(meta["spacing"]), tuple(meta["origin"]))


def write_view(view: View, path) -> None:
    _write_raw(str(path), view.data.ravel(order="F"), {"dims": list(view.dims)})


def read_view(path) -> View:
    payload, meta = _read_raw(str(path))
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 2:
        raise ValueError("view sidecar dims must have length 2")
    return View(payload.reshape(dims, order="F").astype(np.float64))


def write_ray_volume(rv: RayVolume, path) -> None:
    # flat ordering: s fastest, then w, then h
    flat = rv.data.transpose(2, 0, 1).ravel(order="F")
    _write_raw(str(path), flat, {"dims": list(rv.dims), "step_len": rv.step_len})


def read_ray_volume(path) -> RayVolume:
    payload, meta = _read_raw(str(path))
    w, h, s = (int(d) for d in meta["dims"])
    data = payload.reshape((s, w, h), order="F").transpose(1, 2, 0).astype(np.float64)
    return RayVolume(data, float(meta.get("step_len", 1.0)))
