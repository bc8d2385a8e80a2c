"""Volume-wise PSNR and SSIM, with the per-phase report used for method tables."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    if a.dims != b.dims:
        raise ValueError(f"volume dims differ: {a.dims} vs {b.dims}")


def psnr(a, b, data_range: float) -> float:
    """10 log10(range^2 / MSE) in dB; +inf when the volumes agree exactly."""
    _check_pair(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be > 0")
    da = np.asarray(a.data, dtype=np.float64)
    db = np.asarray(b.data, dtype=np.float64)
    mse = float(np.mean((da - db) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim(a, b, data_range: float) -> float:
    """Mean local SSIM over valid 7x7x7 uniform windows."""
    _check_pair(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be > 0")
    if min(a.dims) < SSIM_WINDOW:
        raise ValueError(f"dims must be >= the {SSIM_WINDOW}^3 window")
    da = np.asarray(a.data, dtype=np.float64)
    db = np.asarray(b.data, dtype=np.float64)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def local_mean(x):
        return ndimage.uniform_filter(x, SSIM_WINDOW, mode="constant")

    mu_a = local_mean(da)
    mu_b = local_mean(db)
    var_a = local_mean(da * da) - mu_a * mu_a
    var_b = local_mean(db * db) - mu_b * mu_b
    cov = local_mean(da * db) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
    half = SSIM_WINDOW // 2
    valid = ssim_map[half:-half, half:-half, half:-half]
    return float(np.mean(valid))


@dataclass
class MetricReport:
    per_phase: list[tuple[float, float]]  # (psnr dB, ssim)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([p for p, _ in self.per_phase]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s for _, s in self.per_phase]))


def evaluate_phases(recons, gts, data_range: float | None = None) -> MetricReport:
    """Per-phase metrics against ground truth; the mean is unweighted over phases.

    When data_range is None it is taken per pair from the ground truth's
    max - min.
    """
    if len(recons) != len(gts):
        raise ValueError("phase list lengths differ")
    rows = []
    for r, g in zip(recons, gts):
        rng = data_range
        if rng is None:
            rng = float(np.max(g.data) - np.min(g.data))
            if rng <= 0:
                rng = 1.0
        rows.append((psnr(r, g, rng), ssim(r, g, rng)))
    return MetricReport(rows)


def report_csv(reports: dict[str, MetricReport]) -> str:
    """CSV with one row per (method, phase) plus per-method mean rows."""
    lines = ["method,phase,psnr,ssim"]
    for name, rep in reports.items():
        for i, (p, s) in enumerate(rep.per_phase):
            lines.append(f"{name},{i},{p!r},{s!r}")
        lines.append(f"{name},mean,{rep.mean_psnr!r},{rep.mean_ssim!r}")
    return "\n".join(lines) + "\n"


def report_table(reports: dict[str, MetricReport]) -> str:
    """ASCII table, phases as columns and methods as rows (psnr/ssim cells)."""
    n = max(len(r.per_phase) for r in reports.values())
    headers = ["method"] + [f"phase {i}" for i in range(n)] + ["average"]
    rows = []
    for name, rep in reports.items():
        cells = [f"{p:.1f}/{s:.3f}" for p, s in rep.per_phase]
        cells += [""] * (n - len(cells))
        cells.append(f"{rep.mean_psnr:.1f}/{rep.mean_ssim:.3f}")
        rows.append([name] + cells)
    widths = [max(len(h), *(len(r[c]) for r in rows)) for c, h in enumerate(headers)]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [sep, "|" + "|".join(f" {h:<{w}} " for h, w in zip(headers, widths)) + "|", sep]
    for r in rows:
        out.append("|" + "|".join(f" {c:<{w}} " for c, w in zip(r, widths)) + "|")
    out.append(sep)
    return "\n".join(out) + "\n"
