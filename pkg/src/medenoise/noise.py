"""Rician and Poisson noise simulators and synthetic phantoms.

Noise levels follow one convention throughout: a Rician level of ``p`` percent
means ``sigma = p / 100 * intensity_max``; a Poisson level of ``p`` percent
means a peak photon count of ``(100 / p) ** 2``, so the relative standard
deviation at full intensity is ``p`` percent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DenoiseError, ImageVolume, Modality


class NegativeIntensity(DenoiseError):
    pass


@dataclass(frozen=True)
class RicianParams:
    sigma: float
    level_percent: float = float("nan")

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")

    @classmethod
    def from_percent(cls, level: float, intensity_max: float) -> "RicianParams":
        return cls(level / 100.0 * intensity_max, level)


@dataclass(frozen=True)
class PoissonParams:
    peak_counts: float
    exposure_t: float = 1.0
    level_percent: float = float("nan")

    def __post_init__(self):
        if not (math.isfinite(self.peak_counts) and self.peak_counts > 0):
            raise ValueError(f"peak_counts must be finite and > 0, got {self.peak_counts}")
        if not self.exposure_t > 0:
            raise ValueError(f"exposure_t must be > 0, got {self.exposure_t}")

    @classmethod
    def from_percent(cls, level: float, exposure_t: float = 1.0) -> "PoissonParams":
        return cls((100.0 / level) ** 2, exposure_t, level)


def noise_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) stream; draws are consumed in voxel order."""
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def add_rician(clean: ImageVolume, params: RicianParams, seed: int, clamp: bool = True) -> ImageVolume:
    """Magnitude of the signal plus complex Gaussian noise, ``sqrt((X + g1)^2 + g2^2)``."""
    rng = noise_rng(seed)
    g = rng.standard_normal((2,) + clean.shape) * params.sigma
    noisy = np.hypot(clean.data + g[0], g[1])
    return clean.with_data(noisy, clamp=clamp)


def poisson_counts(clean: ImageVolume, params: PoissonParams, seed: int) -> np.ndarray:
    """Raw photon counts with rate ``X / intensity_max * peak_counts * t``."""
    if np.any(clean.data < 0):
        raise NegativeIntensity("Poisson noise needs non-negative intensities")
    rate = clean.data / clean.intensity_max * params.peak_counts * params.exposure_t
    return noise_rng(seed).poisson(rate).astype(np.float64)


def add_poisson(clean: ImageVolume, params: PoissonParams, seed: int, clamp: bool = True) -> ImageVolume:
    counts = poisson_counts(clean, params, seed)
    scale = clean.intensity_max / (params.peak_counts * params.exposure_t)
    return clean.with_data(counts * scale, clamp=clamp)


def add_noise(clean: ImageVolume, model: str, level: float, seed: int) -> ImageVolume:
    """Add ``level`` percent noise of ``model`` (``"rician"`` or ``"poisson"``)."""
    if model == "rician":
        return add_rician(clean, RicianParams.from_percent(level, clean.intensity_max), seed)
    if model == "poisson":
        return add_poisson(clean, PoissonParams.from_percent(level), seed)
    raise ValueError(f"unknown noise model {model!r}")


# --- Rician density, used only to check the sampler ---------------------------------------

def bessel_i0e(x):
    """Exponentially scaled modified Bessel function ``exp(-|x|) I0(x)``.

    Power series below 30, Hankel asymptotic expansion above.
    """
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.empty_like(x)
    small = x < 30.0
    xs = x[small]
    term = np.ones_like(xs)
    total = np.ones_like(xs)
    q = (xs / 2.0) ** 2
    for k in range(1, 80):
        term = term * q / (k * k)
        total += term
    out[small] = total * np.exp(-xs)
    xl = x[~small]
    series = np.ones_like(xl)
    term = np.ones_like(xl)
    for k in range(1, 12):
        term = term * (2 * k - 1) ** 2 / (8.0 * k * xl)
        series += term
    out[~small] = series / np.sqrt(2.0 * np.pi * xl)
    return out


def rician_pdf(y, x: float, sigma: float):
    """Density of a noisy magnitude ``y`` given the clean intensity ``x``."""
    y = np.asarray(y, dtype=np.float64)
    s2 = sigma * sigma
    arg = x * y / s2
    # exp(-(x^2 + y^2) / 2s^2) * I0(arg) == exp(-(y - x)^2 / 2s^2) * i0e(arg)
    pdf = y / s2 * np.exp(-((y - x) ** 2) / (2.0 * s2)) * bessel_i0e(arg)
    return np.where(y >= 0, pdf, 0.0)


def rician_cdf(x: float, sigma: float, n: int = 200001):
    """Tabulated CDF by Simpson-accurate cumulative quadrature; returns a callable."""
    from scipy.integrate import cumulative_simpson

    hi = x + 12.0 * sigma
    grid = np.linspace(0.0, hi, n)
    cdf = cumulative_simpson(rician_pdf(grid, x, sigma), x=grid, initial=0.0)

    def f(y):
        return np.interp(y, grid, cdf, left=0.0, right=1.0)

    return f


def rician_mean(x, sigma: float):
    """Mean noisy magnitude ``E[Y | X = x]``.

    ``sigma * sqrt(pi/2) * L_1/2(-x^2 / 2 sigma^2)`` written with scaled Bessel
    functions so it stays finite at high SNR.
    """
    from scipy.special import i0e, i1e

    x = np.asarray(x, dtype=np.float64)
    if sigma <= 0:
        return np.abs(x)
    t = x * x / (4.0 * sigma * sigma)
    return sigma * math.sqrt(math.pi / 2.0) * ((1.0 + 2.0 * t) * i0e(t) + 2.0 * t * i1e(t))


def rician_unbias(m, sigma: float, n: int = 20001):
    """Invert :func:`rician_mean`: the clean intensity whose mean magnitude is ``m``.

    Values at or below the noise floor ``sigma * sqrt(pi/2)`` map to 0.
    """
    m = np.asarray(m, dtype=np.float64)
    if sigma <= 0 or m.size == 0:
        return m.copy()
    hi = max(float(m.max()), 0.0) + 10.0 * sigma
    grid = np.linspace(0.0, hi, n)
    return np.interp(m, rician_mean(grid, sigma), grid, left=0.0)


# --- phantoms ------------------------------------------------------------------------------

# Modified (higher-contrast) Shepp-Logan table:
# intensity, semi-axis a, semi-axis b, centre x0, centre y0, rotation (degrees).
SHEPP_LOGAN_ELLIPSES = (
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)


def shepp_logan_value(u, v):
    """Phantom intensity (before rescaling) at normalized coordinates in ``[-1, 1]``.

    ``u`` runs left to right, ``v`` bottom to top.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(np.broadcast(u, v).shape)
    for rho, a, b, x0, y0, phi in SHEPP_LOGAN_ELLIPSES:
        t = np.deg2rad(phi)
        du, dv = u - x0, v - y0
        xr = du * np.cos(t) + dv * np.sin(t)
        yr = -du * np.sin(t) + dv * np.cos(t)
        out = out + rho * ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0)
    return out


def shepp_logan(nx: int, ny: int, intensity_max: float = 255.0) -> ImageVolume:
    """10-ellipse Shepp-Logan phantom rescaled to ``[0, intensity_max]``.

    Array axis 0 is the image row (top to bottom), axis 1 the column.
    """
    if nx < 32 or ny < 32:
        raise ValueError("phantom needs at least 32 x 32 pixels")
    rows = (np.arange(nx) + 0.5) / nx * 2.0 - 1.0
    cols = (np.arange(ny) + 0.5) / ny * 2.0 - 1.0
    img = shepp_logan_value(cols[None, :], -rows[:, None])
    img = np.clip(img, 0.0, None)
    img = img / img.max() * intensity_max
    return ImageVolume(img, intensity_max, Modality.CT)


# value, semi-axes (x, y, z), centre (x, y, z) in normalized [-1, 1] coordinates
MRI_ELLIPSOIDS = (
    (0.35, (0.92, 0.80, 1.60), (0.0, 0.0, 0.0)),    # scalp / fat
    (0.75, (0.84, 0.72, 1.50), (0.0, 0.0, 0.0)),    # white matter
    (1.00, (0.30, 0.22, 0.70), (0.0, 0.0, 0.0)),    # grey matter nucleus
    (0.55, (0.22, 0.30, 0.60), (0.45, 0.10, 0.0)),  # lesion
    (0.55, (0.14, 0.14, 0.45), (-0.45, -0.20, 0.2)),
)


def mri_phantom(nx: int, ny: int, nz: int, intensity_max: float = 255.0) -> ImageVolume:
    """Piecewise-constant head-like volume: air plus four tissue levels.

    Later ellipsoids overwrite earlier ones. The outer ellipsoid is elongated
    along z so every slice contains tissue.
    """
    gx = (np.arange(nx) + 0.5) / nx * 2.0 - 1.0
    gy = (np.arange(ny) + 0.5) / ny * 2.0 - 1.0
    gz = (np.arange(nz) + 0.5) / nz * 2.0 - 1.0
    X, Y, Z = np.meshgrid(gx, gy, gz, indexing="ij")
    vol = np.zeros((nx, ny, nz))
    for value, axes, centre in MRI_ELLIPSOIDS:
        inside = (((X - centre[0]) / axes[0]) ** 2 + ((Y - centre[1]) / axes[1]) ** 2
                  + ((Z - centre[2]) / axes[2]) ** 2) <= 1.0
        vol[inside] = value
    return ImageVolume(vol * intensity_max, intensity_max, Modality.MRI)
