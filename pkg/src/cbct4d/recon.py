"""Iterative algebraic reconstruction: ordered-subset SART with spatial TV,
a joint multi-phase variant with cyclic temporal TV, and the L1 view/ray
loss functionals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ConeBeamGeometry
from .phantom import AcquisitionSet
from .projector import backproject, forward_project
from .volume import RayVolume, View, Volume3

WEIGHT_FLOOR = 1e-6
TV_EPS = 1e-8


@dataclass(frozen=True)
class ReconConfig:
    n_iters: int = 30
    n_subsets: int = 10
    relaxation: float = 0.2
    tv_weight: float = 2e-4
    ttv_weight: float = 1e-2
    nonneg: bool = True
    S: int = 128

    def __post_init__(self):
        if self.n_iters < 1 or self.n_subsets < 1:
            raise ValueError("counts must be >= 1")
        if not (0.0 < self.relaxation < 2.0):
            raise ValueError("relaxation must lie in (0, 2)")
        if self.tv_weight < 0 or self.ttv_weight < 0:
            raise ValueError("TV weights must be >= 0")
        if self.S < 1:
            raise ValueError("S must be >= 1")


# ---------------------------------------------------------------------------
# total variation


def tv_value_grad(data: np.ndarray, eps: float = TV_EPS):
    """Smoothed isotropic TV sum_x sqrt(|forward-diff|^2 + eps) and its gradient."""
    diffs = []
    for ax in range(3):
        d = np.zeros_like(data)
        sl_hi = [slice(None)] * 3
        sl_lo = [slice(None)] * 3
        sl_hi[ax] = slice(1, None)
        sl_lo[ax] = slice(0, -1)
        d[tuple(sl_lo)] = data[tuple(sl_hi)] - data[tuple(sl_lo)]
        diffs.append(d)
    phi = np.sqrt(diffs[0] ** 2 + diffs[1] ** 2 + diffs[2] ** 2 + eps)
    value = float(phi.sum())
    grad = np.zeros_like(data)
    for ax, d in enumerate(diffs):
        w = d / phi
        # adjoint of the forward difference with a zero last row
        sl_hi = [slice(None)] * 3
        sl_lo = [slice(None)] * 3
        sl_hi[ax] = slice(1, None)
        sl_lo[ax] = slice(0, -1)
        grad[tuple(sl_lo)] -= w[tuple(sl_lo)]
        grad[tuple(sl_hi)] += w[tuple(sl_lo)]
    return value, grad


def ttv_value_grad(stack: list[np.ndarray], eps: float = TV_EPS):
    """Cyclic temporal TV sum_i |V_{i+1} - V_i|_1 (smoothed) with per-phase gradients."""
    n = len(stack)
    grads = [np.zeros_like(v) for v in stack]
    if n < 2:
        return 0.0, grads
    value = 0.0
    for i in range(n):
        j = (i + 1) % n
        d = stack[j] - stack[i]
        phi = np.sqrt(d ** 2 + eps)
        value += float(phi.sum())
        w = d / phi
        grads[i] -= w
        grads[j] += w
    return value, grads


# ---------------------------------------------------------------------------
# OSSART


def _subset_order(n_views: int, n_subsets: int) -> list[list[int]]:
    """Round-robin subsets by view position with stride n_subsets, empties dropped."""
    subsets = [list(range(j, n_views, n_subsets)) for j in range(min(n_subsets, n_views))]
    return [s for s in subsets if s]


class _SartSystem:
    """Precomputed normalization weights for one view subset system."""

    def __init__(self, views, ks, geom, cfg, template: Volume3):
        if len(views) == 0:
            raise ValueError("need at least one view")
        if len(views) != len(ks):
            raise ValueError("views and view indices differ in length")
        for v in views:
            if v.dims != (geom.det_w, geom.det_h):
                raise ValueError("view dims do not match the detector")
        self.views = views
        self.ks = list(ks)
        self.geom = geom
        self.cfg = cfg
        self.dims = template.dims
        self.spacing = template.spacing
        self.origin = template.origin
        ones = template.like(np.ones(template.dims))
        self.row = [np.maximum(forward_project(ones, geom, k, cfg.S).data, WEIGHT_FLOOR)
                    for k in self.ks]
        self.subsets = _subset_order(len(views), cfg.n_subsets)
        self.col = []
        for sub in self.subsets:
            acc = np.zeros(self.dims)
            for j in sub:
                ones_view = View(np.ones((geom.det_w, geom.det_h)))
                acc += backproject(ones_view, geom, self.ks[j], cfg.S,
                                   self.dims, self.spacing, self.origin).data
            self.col.append(np.maximum(acc, WEIGHT_FLOOR))

    def sweep(self, data: np.ndarray) -> np.ndarray:
        """One full pass over all ordered subsets (data update only)."""
        vol = Volume3(data, self.spacing, self.origin)
        for sub, col in zip(self.subsets, self.col):
            corr = np.zeros(self.dims)
            for j in sub:
                k = self.ks[j]
                sim = forward_project(vol, self.geom, k, self.cfg.S)
                resid = (self.views[j].data - sim.data) / self.row[j]
                corr += backproject(View(resid), self.geom, k, self.cfg.S,
                                    self.dims, self.spacing, self.origin).data
            data = data + self.cfg.relaxation * corr / col
            vol = Volume3(data, self.spacing, self.origin)
        return data

    def regularize(self, data: np.ndarray) -> np.ndarray:
        if self.cfg.tv_weight > 0:
            _, g = tv_value_grad(data)
            data = data - self.cfg.tv_weight * g
        if self.cfg.nonneg:
            data = np.maximum(data, 0.0)
        return data


def ossart(views: list[View], ks: list[int], geom: ConeBeamGeometry,
           cfg: ReconConfig, init: Volume3) -> Volume3:
    """Ordered-subset SART on a view subset from a fixed initialization.

    Each iteration runs one normalized data pass over all subsets, then one
    TV gradient step (weight tv_weight), then a nonnegativity clamp.
    """
    sys = _SartSystem(views, ks, geom, cfg, init)
    data = np.asarray(init.data, dtype=np.float64).copy()
    for _ in range(cfg.n_iters):
        data = sys.sweep(data)
        data = sys.regularize(data)
    return init.like(data)


def ossart_ttv(acq: AcquisitionSet, cfg: ReconConfig, template: Volume3) -> list[Volume3]:
    """Joint per-phase OSSART with cyclic temporal TV coupling across phases.

    With ttv_weight == 0 (or a single phase) the outputs equal independent
    per-phase ossart runs bitwise.
    """
    n = acq.binning.n_phases
    systems = []
    for i, b in enumerate(acq.binning.bins):
        if not b:
            raise ValueError(f"phase {i} has no views")
        systems.append(_SartSystem([acq.views[k] for k in b], b, acq.geom, cfg, template))
    stack = [np.asarray(template.data, dtype=np.float64).copy() for _ in range(n)]
    couple = cfg.ttv_weight > 0 and n > 1
    for _ in range(cfg.n_iters):
        for i in range(n):
            stack[i] = systems[i].sweep(stack[i])
            stack[i] = systems[i].regularize(stack[i])
        if couple:
            _, grads = ttv_value_grad(stack)
            for i in range(n):
                stack[i] = stack[i] - cfg.ttv_weight * grads[i]
                if cfg.nonneg:
                    stack[i] = np.maximum(stack[i], 0.0)
    return [template.like(d) for d in stack]


# ---------------------------------------------------------------------------
# loss functionals


def loss_rec(p_syn: View, p_obs: View) -> float:
    """Mean absolute difference between a synthesized and an observed view."""
    if p_syn.dims != p_obs.dims:
        raise ValueError("view dims differ")
    return float(np.mean(np.abs(np.asarray(p_syn.data, np.float64)
                                - np.asarray(p_obs.data, np.float64))))


def loss_ma(r_list: list[RayVolume], r_ma: RayVolume) -> float:
    """Mean absolute difference between the phase-mean ray stack and the
    motion-affected reference stack."""
    if not r_list:
        raise ValueError("need at least one phase stack")
    for r in r_list:
        if r.dims != r_ma.dims:
            raise ValueError("ray volume dims differ")
    acc = np.zeros(r_ma.dims, dtype=np.float64)
    for r in r_list:
        acc += r.data
    acc /= len(r_list)
    return float(np.mean(np.abs(acc - np.asarray(r_ma.data, np.float64))))
