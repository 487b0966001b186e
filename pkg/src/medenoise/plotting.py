"""Figures for the bench report, rendered off-screen to PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings inside the files
_PNG_META = {"Software": None}


def _middle_slice(vol):
    data = vol.data if hasattr(vol, "data") else np.asarray(vol)
    if data.ndim == 3:
        data = data[:, :, data.shape[2] // 2]
    return data


def comparison_figure(path, clean, noisy, denoised, title=""):
    """Clean, noisy and denoised middle slices side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.3))
    vmax = getattr(clean, "intensity_max", None)
    for ax, vol, name in zip(axes, (clean, noisy, denoised), ("clean", "noisy", "denoised")):
        ax.imshow(_middle_slice(vol), cmap="gray", vmin=0, vmax=vmax, interpolation="nearest")
        ax.set_title(name)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def psnr_figure(path, rows, model=""):
    """PSNR of the noisy and denoised volumes against noise level."""
    ok = [r for r in rows if r.ok]
    fig, ax = plt.subplots(figsize=(4.5, 3.3))
    if ok:
        levels = [r.level for r in ok]
        ax.plot(levels, [r.noisy.psnr_db for r in ok], "o--", label="noisy")
        ax.plot(levels, [r.denoised.psnr_db for r in ok], "s-", label="denoised")
        ax.legend()
    ax.set_xlabel("noise level (%)")
    ax.set_ylabel("PSNR (dB)")
    if model:
        ax.set_title(model)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def mosaic_figure(path, mosaic, title=""):
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(mosaic, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    ax.axis("off")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
