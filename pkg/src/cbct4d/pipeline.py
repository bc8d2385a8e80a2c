"""End-to-end pipeline: simulate a gated acquisition, reconstruct with each
method, refine with deformation fields, and evaluate against ground truth.

Every stage reads and writes disk artifacts under the output directory, so
running stages individually composes bit-identically with a monolithic run.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dvf import Dvf, demons_register, read_dvf, write_dvf
from .geometry import ConeBeamGeometry, full_scan_angles
from .metrics import MetricReport, evaluate_phases, report_csv, report_table
from .phantom import (AcquisitionSet, Phantom4D, breathing_phase_assignment,
                      ground_truth_dvf, load_acquisition, render_phantom,
                      save_acquisition, simulate_acquisition)
from .recon import ReconConfig, ossart, ossart_ttv
from .refine import RefineConfig, dvf_refine
from .volume import Volume3, centered_volume, read_volume, write_volume

KNOWN_METHODS = ("ossart", "ossart_ttv", "dvf_gt", "dvf_est")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass
class DemonsConfig:
    levels: int = 3
    iters: int = 15
    sigma_fluid: float = 3.0
    sigma_diffusion: float = 3.0


@dataclass
class PipelineConfig:
    # volume grid
    dims: tuple = (64, 64, 64)
    spacing: tuple = (3.0, 3.0, 3.0)
    # phantom / motion
    n_phases: int = 4
    tumor_amplitude: float = 6.0
    # geometry
    n_views: int = 120
    det_w: int = 128
    det_h: int = 96
    det_spacing: float = 4.0
    sad: float = 1000.0
    sdd: float = 1500.0
    det_offset_u: float = 0.0
    det_offset_v: float = 0.0
    # gating
    period_views: float = 30.0
    phase_shift: float = 0.0
    # simulation
    S: int = 128
    noise_sigma: float = 0.0
    seed: int = 0
    # methods and solver configs
    methods: tuple = KNOWN_METHODS
    recon: ReconConfig = field(default_factory=lambda: ReconConfig(n_iters=20, S=64))
    recon_ttv: ReconConfig = field(default_factory=lambda: ReconConfig(n_iters=20, S=64))
    # the desk-scale budget wants a tighter refinement schedule than the
    # module default; secant-adapted steps converge well within a dozen passes,
    # and halving the march steps costs well under 1 dB here
    refine: RefineConfig = field(default_factory=lambda: RefineConfig(n_iters=9, S=64))
    demons: DemonsConfig = field(default_factory=DemonsConfig)
    threads: int = 1

    def __post_init__(self):
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ValueError(f"unknown method {m!r}; known: {KNOWN_METHODS}")
        self.methods = tuple(self.methods)
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)

    def phantom(self) -> Phantom4D:
        return Phantom4D(n_phases=self.n_phases, tumor_amplitude=self.tumor_amplitude)

    def geometry(self) -> ConeBeamGeometry:
        return ConeBeamGeometry(
            sad=self.sad, sdd=self.sdd, det_w=self.det_w, det_h=self.det_h,
            det_spacing_u=self.det_spacing, det_spacing_v=self.det_spacing,
            det_offset_u=self.det_offset_u, det_offset_v=self.det_offset_v,
            angles=full_scan_angles(self.n_views))


def config_from_dict(doc: dict) -> PipelineConfig:
    doc = dict(doc)
    sub = {}
    for key, cls in (("recon", ReconConfig), ("recon_ttv", ReconConfig),
                     ("refine", RefineConfig), ("demons", DemonsConfig)):
        if key in doc:
            sub[key] = cls(**doc.pop(key))
    return PipelineConfig(**doc, **sub)


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def _pmap(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _phase_paths(out_dir: str, sub: str, n: int) -> list[str]:
    return [os.path.join(out_dir, sub, f"phase_{i}.vol") for i in range(n)]


def _load_phases(out_dir: str, sub: str, n: int) -> list[Volume3]:
    paths = _phase_paths(out_dir, sub, n)
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing artifact {p}; run the producing stage first")
    return [read_volume(p) for p in paths]


def _save_phases(vols: list[Volume3], out_dir: str, sub: str) -> None:
    os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for i, v in enumerate(vols):
        write_volume(v, os.path.join(out_dir, sub, f"phase_{i}.vol"))


# ---------------------------------------------------------------------------
# stages


def stage_simulate(cfg: PipelineConfig, out_dir: str) -> None:
    """Render ground-truth phases and simulate the gated acquisition."""
    ph = cfg.phantom()
    geom = cfg.geometry()
    binning = breathing_phase_assignment(cfg.n_phases, cfg.n_views,
                                         cfg.period_views, cfg.phase_shift)
    gts = [render_phantom(ph, i, cfg.dims, cfg.spacing) for i in range(cfg.n_phases)]
    _save_phases(gts, out_dir, "gt")
    acq = simulate_acquisition(ph, geom, binning, cfg.S, cfg.noise_sigma,
                               noise_seed=cfg.seed, dims=cfg.dims, spacing=cfg.spacing)
    save_acquisition(acq, os.path.join(out_dir, "acq"))


def stage_reconstruct(cfg: PipelineConfig, out_dir: str, method: str) -> None:
    """Per-phase OSSART ('ossart') or joint temporal-TV OSSART ('ossart_ttv')."""
    acq = load_acquisition(os.path.join(out_dir, "acq"))
    template = centered_volume(cfg.dims, cfg.spacing)
    if method == "ossart":
        def run(i):
            ks = acq.binning.bins[i]
            return ossart([acq.views[k] for k in ks], ks, acq.geom, cfg.recon, template)
        vols = _pmap(run, list(range(cfg.n_phases)), cfg.threads)
        _save_phases(vols, out_dir, "recon_ossart")
    elif method == "ossart_ttv":
        vols = ossart_ttv(acq, cfg.recon_ttv, template)
        _save_phases(vols, out_dir, "recon_ossart_ttv")
    else:
        raise ValueError(f"not a reconstruction method: {method}")


def _dvf_dir(out_dir: str, kind: str) -> str:
    return os.path.join(out_dir, f"dvf_{kind}_fields")


def stage_register(cfg: PipelineConfig, out_dir: str, kind: str) -> None:
    """Produce inter-phase fields: 'gt' analytic, 'est' demons on TTV recons."""
    d = _dvf_dir(out_dir, kind)
    os.makedirs(d, exist_ok=True)
    n = cfg.n_phases
    if kind == "gt":
        ph = cfg.phantom()
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                write_dvf(ground_truth_dvf(ph, i, j, cfg.dims, cfg.spacing),
                          os.path.join(d, f"d_{i}_{j}"))
    elif kind == "est":
        vols = _load_phases(out_dir, "recon_ossart_ttv", n)
        # register each unordered pair once; the reverse field is the
        # negation, which is first-order exact for these small motions and
        # measured slightly better than a separately estimated reverse field
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

        def run(pair):
            i, j = pair
            dm = cfg.demons
            return demons_register(vols[i], vols[j], levels=dm.levels, iters=dm.iters,
                                   sigma_fluid=dm.sigma_fluid,
                                   sigma_diffusion=dm.sigma_diffusion)
        fields = _pmap(run, pairs, cfg.threads)
        for (i, j), f in zip(pairs, fields):
            write_dvf(f, os.path.join(d, f"d_{i}_{j}"))
            write_dvf(Dvf(-f.disp), os.path.join(d, f"d_{j}_{i}"))
    else:
        raise ValueError(f"unknown field kind {kind!r}")


def stage_refine(cfg: PipelineConfig, out_dir: str, kind: str) -> None:
    """Deformation-based refinement with 'gt' or 'est' fields.

    Both kinds start from the per-phase OSSART volumes, so the two refined
    methods differ only in the quality of the deformation fields.
    """
    acq = load_acquisition(os.path.join(out_dir, "acq"))
    n = cfg.n_phases
    inits = _load_phases(out_dir, "recon_ossart", n)
    d = _dvf_dir(out_dir, kind)
    gts = None
    try:
        gts = _load_phases(out_dir, "gt", n)
    except FileNotFoundError:
        pass

    def run(i):
        fields = {j: read_dvf(os.path.join(d, f"d_{i}_{j}"))
                  for j in range(n) if j != i}
        log_path = os.path.join(out_dir, f"refine_{kind}_phase_{i}.csv")
        return dvf_refine(inits[i], i, fields, acq, cfg.refine,
                          log_path=log_path, gt=gts[i] if gts else None)
    vols = _pmap(run, list(range(n)), cfg.threads)
    _save_phases(vols, out_dir, f"recon_dvf_{kind}")


_METHOD_DIRS = {"ossart": "recon_ossart", "ossart_ttv": "recon_ossart_ttv",
                "dvf_gt": "recon_dvf_gt", "dvf_est": "recon_dvf_est"}


def stage_evaluate(cfg: PipelineConfig, out_dir: str) -> dict[str, MetricReport]:
    """Score every produced method against ground truth; emit CSV, table, slices."""
    gts = _load_phases(out_dir, "gt", cfg.n_phases)
    reports: dict[str, MetricReport] = {}
    for method in cfg.methods:
        sub = _METHOD_DIRS[method]
        vols = _load_phases(out_dir, sub, cfg.n_phases)
        reports[method] = evaluate_phases(vols, gts)
        for i, v in enumerate(vols):
            _write_pgm_midslice(v, gts[i],
                                os.path.join(out_dir, sub, f"phase_{i}_mid.pgm"))
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write(report_csv(reports))
    with open(os.path.join(out_dir, "table.txt"), "w") as f:
        f.write(report_table(reports))
    return reports


def _write_pgm_midslice(vol: Volume3, ref: Volume3, path: str) -> None:
    lo = float(np.min(ref.data))
    hi = float(np.max(ref.data))
    span = hi - lo if hi > lo else 1.0
    sl = vol.data[:, :, vol.dims[2] // 2]
    img = np.clip((sl - lo) / span * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[0]} {img.shape[1]}\n255\n".encode())
        f.write(img.T.tobytes())


def run_pipeline(cfg: PipelineConfig, out_dir: str) -> dict[str, MetricReport]:
    """Run every stage needed for cfg.methods; artifacts land under out_dir."""
    os.makedirs(out_dir, exist_ok=True)

    def guarded(stage_name, fn, *args):
        try:
            return fn(*args)
        except Exception as e:
            raise PipelineError(stage_name, str(e)) from e

    guarded("simulate", stage_simulate, cfg, out_dir)
    need_ossart = ("ossart" in cfg.methods or "dvf_gt" in cfg.methods
                   or "dvf_est" in cfg.methods)
    need_ttv = "ossart_ttv" in cfg.methods or "dvf_est" in cfg.methods
    if need_ossart:
        guarded("reconstruct:ossart", stage_reconstruct, cfg, out_dir, "ossart")
    if need_ttv:
        guarded("reconstruct:ossart_ttv", stage_reconstruct, cfg, out_dir, "ossart_ttv")
    if "dvf_gt" in cfg.methods:
        guarded("register:gt", stage_register, cfg, out_dir, "gt")
        guarded("refine:gt", stage_refine, cfg, out_dir, "gt")
    if "dvf_est" in cfg.methods:
        guarded("register:est", stage_register, cfg, out_dir, "est")
        guarded("refine:est", stage_refine, cfg, out_dir, "est")
    return guarded("evaluate", stage_evaluate, cfg, out_dir)
