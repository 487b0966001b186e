"""PSNR, SSIM and RMSE between two volumes of the same shape."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import DenoiseError, ImageVolume


class ShapeMismatch(DenoiseError):
    pass


class TooSmall(DenoiseError):
    pass


SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    rmse: float
    intensity_max: float

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr_db)

    def lines(self):
        """The three ``NAME value`` lines, three decimals each."""
        psnr = "inf" if self.psnr_infinite else f"{self.psnr_db:.3f}"
        return [f"PSNR {psnr}", f"SSIM {self.ssim:.3f}", f"RMSE {self.rmse:.3f}"]


def _arrays(a, b):
    x = a.data if isinstance(a, ImageVolume) else np.asarray(a, dtype=np.float64)
    y = b.data if isinstance(b, ImageVolume) else np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {x.shape} vs {y.shape}")
    return x, y


def rmse(a, b) -> float:
    x, y = _arrays(a, b)
    d = x - y
    return math.sqrt(float(np.mean(d * d)))


def psnr(a, b, intensity_max: float = 255.0) -> float:
    """``20 log10(intensity_max / rmse)``; ``inf`` for identical inputs."""
    err = rmse(a, b)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(intensity_max / err)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter(img, w):
    return correlate1d(correlate1d(img, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")


def ssim_map(x: np.ndarray, y: np.ndarray, intensity_max: float) -> np.ndarray:
    """Local SSIM of two 2D images, cropped to where the window fits."""
    w = gaussian_window()
    c1 = (SSIM_K1 * intensity_max) ** 2
    c2 = (SSIM_K2 * intensity_max) ** 2
    mx, my = _filter(x, w), _filter(y, w)
    sxx = _filter(x * x, w) - mx * mx
    syy = _filter(y * y, w) - my * my
    sxy = _filter(x * y, w) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    h = SSIM_WIN // 2
    return (num / den)[h:-h, h:-h]


def ssim(a, b, intensity_max: float = 255.0) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5); 3D volumes slice by slice."""
    x, y = _arrays(a, b)
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    if min(x.shape[:2]) < SSIM_WIN:
        raise TooSmall(f"SSIM needs slices of at least {SSIM_WIN} x {SSIM_WIN}, got {x.shape[:2]}")
    vals = [float(np.mean(ssim_map(x[:, :, z], y[:, :, z], intensity_max))) for z in range(x.shape[2])]
    return float(np.mean(vals))


def evaluate(ref, test, intensity_max: float = None) -> MetricReport:
    if intensity_max is None:
        intensity_max = ref.intensity_max if isinstance(ref, ImageVolume) else 255.0
    return MetricReport(psnr(ref, test, intensity_max), ssim(ref, test, intensity_max),
                        rmse(ref, test), intensity_max)
