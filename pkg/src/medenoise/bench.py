"""Noise sweep benchmark: phantom, noise, denoise and metrics per level.

Each row gets its own seeds from :func:`split_seed`, so rows are independent
and may run on separate threads. BLAS is pinned to one thread while the rows run
so the numbers do not depend on the machine's thread settings.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import io, plotting
from .core import DenoiseConfig, ImageVolume, split_seed
from .dictionary import dictionary_mosaic
from .metrics import MetricReport, evaluate
from .noise import add_noise, mri_phantom, shepp_logan
from .pipeline import denoise_volume

logger = logging.getLogger(__name__)

PHANTOMS = ("shepp", "mri3d")
DEFAULT_SIZES = {"shepp": (128, 128, 1), "mri3d": (64, 64, 16)}
DEFAULT_MODELS = {"shepp": "poisson", "mri3d": "rician"}


def desk_config(phantom: str) -> DenoiseConfig:
    """Small settings that finish in minutes on one core."""
    if phantom == "shepp":
        return DenoiseConfig(patch_shape=(8, 8, 1), stride=(4, 4, 1), dict_atoms=256, sparsity=4,
                             net_depth=5, net_filters=32, net_batch=16, net_epochs=20, train_patches=961,
                             ksvd_sweeps=50, refit_sweeps=5, outer_iters=2)
    if phantom == "mri3d":
        return DenoiseConfig(patch_shape=(8, 8, 4), stride=(4, 4, 4), dict_atoms=256, sparsity=4, mu=1.3,
                             net_depth=5, net_filters=8, net_epochs=6, train_patches=512, ksvd_sweeps=5,
                             refit_sweeps=1, outer_iters=2, bias_correction="rician")
    raise ValueError(f"unknown phantom {phantom!r}")


def make_phantom(phantom: str, size=None, intensity_max: float = 255.0) -> ImageVolume:
    nx, ny, nz = size or DEFAULT_SIZES[phantom]
    if phantom == "shepp":
        return shepp_logan(nx, ny, intensity_max)
    if phantom == "mri3d":
        return mri_phantom(nx, ny, nz, intensity_max)
    raise ValueError(f"unknown phantom {phantom!r}")


def row_seeds(seed: int, row: int):
    """``(noise_seed, pipeline_seed)`` for one row."""
    a, b = split_seed(seed, row).generate_state(2, dtype=np.uint32)
    return int(a), int(b)


@dataclass
class BenchRow:
    model: str
    level: float
    noisy: Optional[MetricReport] = None
    denoised: Optional[MetricReport] = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    @property
    def tag(self) -> str:
        return f"{self.model}_{self.level:g}"


COLUMNS = ("model", "level", "noisy_psnr", "noisy_ssim", "noisy_rmse",
           "denoised_psnr", "denoised_ssim", "denoised_rmse", "status")


@dataclass
class BenchTable:
    phantom: str
    rows: List[BenchRow]

    def cells(self):
        out = []
        for r in self.rows:
            if r.ok:
                nums = [r.noisy.psnr_db, r.noisy.ssim, r.noisy.rmse,
                        r.denoised.psnr_db, r.denoised.ssim, r.denoised.rmse]
                vals = [f"{v:.3f}" for v in nums]
                status = "ok"
            else:
                vals = ["-"] * 6
                status = "failed:" + r.error.replace(",", ";").replace(" ", "_")
            out.append([r.model, f"{r.level:g}"] + vals + [status])
        return out

    def to_text(self) -> str:
        rows = [list(COLUMNS)] + self.cells()
        widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = [list(COLUMNS)] + self.cells()
        return "\n".join(",".join(row) for row in rows) + "\n"


def _run_row(clean, model, level, seed, row, cfg, out: Optional[Path]):
    res = BenchRow(model, level)
    noise_seed, pipe_seed = row_seeds(seed, row)
    try:
        noisy = add_noise(clean, model, level, noise_seed)
        den, report = denoise_volume(noisy, replace(cfg, rng_seed=pipe_seed))
        res.noisy = evaluate(clean, noisy)
        res.denoised = evaluate(clean, den)
    except Exception as exc:  # one bad row must not sink the table
        logger.warning("row %s %g failed: %s", model, level, exc)
        res.error = type(exc).__name__
        return res, None
    if not all(math.isfinite(v) for v in (res.noisy.psnr_db, res.denoised.psnr_db)):
        res.error = "NonFiniteMetric"
    if out is not None:
        io.write_volume(out / f"noisy_{res.tag}.mvol", noisy)
        io.write_volume(out / f"denoised_{res.tag}.mvol", den)
        (out / f"report_{res.tag}.txt").write_text(report.to_text())
        if report.dictionary is not None:
            io.write_pgm(out / f"dictionary_{res.tag}.pgm", dictionary_mosaic(report.dictionary))
    return res, (noisy, den, report)


def run_bench(phantom: str = "shepp", levels: Sequence[float] = (5, 10, 15), model: Optional[str] = None,
              seed: int = 0, out_dir=None, workers: int = 1, size=None, cfg: Optional[DenoiseConfig] = None,
              figures: bool = True) -> BenchTable:
    """Run one row per noise level and write the table (and artifacts) to ``out_dir``.

    Files written: ``table.txt``, ``table.csv``, ``clean.mvol`` and per row
    ``noisy_*.mvol``, ``denoised_*.mvol``, ``report_*.txt``,
    ``dictionary_*.pgm``; with ``figures`` also ``compare_*.png``,
    ``dictionary_*.png`` and ``psnr.png``.
    """
    model = model or DEFAULT_MODELS[phantom]
    cfg = cfg or desk_config(phantom)
    clean = make_phantom(phantom, size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        io.write_volume(out / "clean.mvol", clean)

    jobs = [(clean, model, float(lv), seed, i, cfg, out) for i, lv in enumerate(levels)]
    # process-wide, so set once around all rows rather than per thread
    with threadpool_limits(limits=1):
        if workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda a: _run_row(*a), jobs))
        else:
            results = [_run_row(*a) for a in jobs]
    table = BenchTable(phantom, [r for r, _ in results])

    if out is not None:
        (out / "table.txt").write_text(table.to_text())
        (out / "table.csv").write_text(table.to_csv())
        if figures:
            for row, extra in results:
                if extra is None:
                    continue
                noisy, den, report = extra
                plotting.comparison_figure(out / f"compare_{row.tag}.png", clean, noisy, den,
                                           f"{row.model} {row.level:g}%")
                if report.dictionary is not None:
                    plotting.mosaic_figure(out / f"dictionary_{row.tag}.png",
                                           dictionary_mosaic(report.dictionary), f"atoms, {row.tag}")
            plotting.psnr_figure(out / "psnr.png", table.rows, model)
    return table
