"""Shared value types, configuration and seeded random streams."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence, Tuple

import numpy as np


class DenoiseError(Exception):
    """Base class for every error raised by this package."""


class InvalidVolume(DenoiseError):
    pass


class PatchLargerThanVolume(DenoiseError):
    pass


class NonPositiveParameter(DenoiseError):
    pass


class SparsityExceedsAtoms(DenoiseError):
    pass


class InvalidParameter(DenoiseError):
    pass


class ConfigError(DenoiseError):
    """Raised by :func:`validate_config`; ``problems`` lists every violation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{type(p).__name__}: {p}" for p in self.problems))


class Modality(enum.Enum):
    MRI = "MRI"
    CT = "CT"
    SYNTHETIC = "Synthetic"


def as_3d(shape: Sequence[int]) -> Tuple[int, int, int]:
    """Pad a 2- or 3-tuple shape to three axes (2D images get ``nz = 1``)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        shape = shape + (1,)
    if len(shape) != 3:
        raise ValueError(f"expected a 2D or 3D shape, got {shape}")
    return shape


@dataclass(frozen=True, eq=False)
class ImageVolume:
    """A 2D image or 3D voxel block, always stored as ``(nx, ny, nz)`` float64.

    The array is copied and frozen on construction, so instances can be shared
    freely between threads.
    """

    data: np.ndarray
    intensity_max: float = 255.0
    modality: Modality = Modality.SYNTHETIC

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise InvalidVolume(f"volume must be 2D or 3D and non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidVolume("volume contains NaN or Inf")
        if not (math.isfinite(self.intensity_max) and self.intensity_max > 0):
            raise InvalidVolume(f"intensity_max must be positive and finite, got {self.intensity_max}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "intensity_max", float(self.intensity_max))
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    @property
    def is_2d(self) -> bool:
        return self.data.shape[2] == 1

    def with_data(self, data, clamp: bool = False) -> "ImageVolume":
        """New volume with the same metadata; optionally clamped to ``[0, intensity_max]``."""
        data = np.asarray(data, dtype=np.float64)
        if clamp:
            data = np.clip(data, 0.0, self.intensity_max)
        return ImageVolume(data.reshape(self.shape), self.intensity_max, self.modality)

    def clamped(self) -> "ImageVolume":
        return self.with_data(self.data, clamp=True)


@dataclass(frozen=True)
class PatchGrid:
    """Geometry of an overlapping patch decomposition.

    ``origins`` is an ``(r, 3)`` integer array in lexicographic order; row ``j``
    is the corner of patch ``j``.
    """

    volume_shape: Tuple[int, int, int]
    patch_shape: Tuple[int, int, int]
    stride: Tuple[int, int, int]
    origins: np.ndarray = field(repr=False, compare=False)

    @property
    def n_patches(self) -> int:
        return len(self.origins)

    @property
    def patch_size(self) -> int:
        return int(np.prod(self.patch_shape))

    def coverage(self) -> np.ndarray:
        """Number of patches covering each voxel."""
        cov = np.zeros(self.volume_shape, dtype=np.int64)
        px, py, pz = self.patch_shape
        for x, y, z in self.origins:
            cov[x:x + px, y:y + py, z:z + pz] += 1
        return cov


@dataclass(frozen=True)
class DenoiseConfig:
    """All tunables of the denoising loop.

    ``patch_shape``/``dict_atoms``/``stride``/``net_kernel`` left as ``None``
    are resolved against the volume by :meth:`resolved`.
    """

    lam: float = 0.5
    mu: float = 1.0
    sparsity: int = 4
    dict_atoms: Optional[int] = None
    outer_iters: int = 3
    outer_tol: float = 1e-3
    net_depth: int = 14
    net_filters: int = 84
    rng_seed: int = 0
    patch_shape: Optional[Tuple[int, int, int]] = None
    stride: Optional[Tuple[int, int, int]] = None
    net_kernel: Optional[Tuple[int, int, int]] = None
    ksvd_sweeps: int = 5
    refit_sweeps: int = 1
    net_epochs: int = 4
    net_lr: float = 1e-3
    net_lr_decay: float = 0.9
    net_batch: int = 32
    train_patches: int = 512
    noise_sigma: Optional[float] = None
    residue_mode: str = "signed"
    rl_target: str = "synthetic"
    bias_correction: str = "off"
    workers: int = 1

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def resolved(self, volume_shape) -> "DenoiseConfig":
        """Fill the volume-dependent defaults."""
        nx, ny, nz = as_3d(volume_shape)
        patch = self.patch_shape
        if patch is None:
            patch = (8, 8, 1) if nz == 1 else (8, 8, min(4, nz))
        patch = as_3d(patch)
        stride = self.stride
        if stride is None:
            stride = tuple(max(1, p // 2) for p in patch)
        stride = as_3d(stride)
        atoms = self.dict_atoms if self.dict_atoms is not None else 4 * int(np.prod(patch))
        kernel = self.net_kernel
        if kernel is None:
            kz = 1 if patch[2] == 1 else min(8, patch[2])
            kernel = (3, 3, kz)
        return replace(self, patch_shape=patch, stride=stride, dict_atoms=int(atoms),
                       net_kernel=as_3d(kernel))


def validate_config(cfg: DenoiseConfig, vol: ImageVolume, grid: Optional[PatchGrid] = None) -> DenoiseConfig:
    """Check every invariant and return ``cfg`` unchanged, or raise :class:`ConfigError`.

    All violated constraints are collected before raising.
    """
    problems = []
    rc = cfg.resolved(vol.shape)
    patch = grid.patch_shape if grid is not None else rc.patch_shape
    stride = grid.stride if grid is not None else rc.stride
    if any(p > v for p, v in zip(patch, vol.shape)):
        problems.append(PatchLargerThanVolume(f"patch {patch} does not fit volume {vol.shape}"))
    for name in ("lam", "sparsity", "outer_iters", "net_filters", "net_epochs", "net_batch",
                 "train_patches", "workers", "net_lr"):
        if not getattr(cfg, name) > 0:
            problems.append(NonPositiveParameter(f"{name} must be > 0, got {getattr(cfg, name)}"))
    if any(p < 1 for p in patch):
        problems.append(NonPositiveParameter(f"patch_shape must be positive, got {patch}"))
    if any(s < 1 for s in stride):
        problems.append(NonPositiveParameter(f"stride must be positive, got {stride}"))
    if rc.dict_atoms < 1:
        problems.append(NonPositiveParameter(f"dict_atoms must be > 0, got {rc.dict_atoms}"))
    if cfg.mu < 0:
        problems.append(NonPositiveParameter(f"mu must be >= 0, got {cfg.mu}"))
    if cfg.outer_tol < 0:
        problems.append(NonPositiveParameter(f"outer_tol must be >= 0, got {cfg.outer_tol}"))
    if cfg.ksvd_sweeps < 0 or cfg.refit_sweeps < 0:
        problems.append(NonPositiveParameter("sweep counts must be >= 0"))
    if cfg.noise_sigma is not None and not cfg.noise_sigma > 0:
        problems.append(NonPositiveParameter(f"noise_sigma must be > 0, got {cfg.noise_sigma}"))
    if cfg.net_depth < 3:
        problems.append(NonPositiveParameter(f"net_depth must be >= 3, got {cfg.net_depth}"))
    if cfg.sparsity > rc.dict_atoms:
        problems.append(SparsityExceedsAtoms(f"sparsity {cfg.sparsity} > dict_atoms {rc.dict_atoms}"))
    if cfg.residue_mode not in ("signed", "magnitude"):
        problems.append(InvalidParameter(f"unknown residue_mode {cfg.residue_mode!r}"))
    if not 0 < cfg.net_lr_decay <= 1:
        problems.append(InvalidParameter(f"net_lr_decay must be in (0, 1], got {cfg.net_lr_decay}"))
    if cfg.rl_target not in ("synthetic", "dictionary"):
        problems.append(InvalidParameter(f"unknown rl_target {cfg.rl_target!r}"))
    if cfg.bias_correction not in ("off", "rician"):
        problems.append(InvalidParameter(f"unknown bias_correction {cfg.bias_correction!r}"))
    if problems:
        raise ConfigError(problems)
    return cfg


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream for ``seed``; identical seeds give identical draws."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & (2**64 - 1))))


def split_seed(seed: int, worker: int) -> np.random.SeedSequence:
    """Independent child seed for ``worker``.

    The child is ``SeedSequence(seed, spawn_key=(worker,))``, which is exactly
    what ``SeedSequence(seed).spawn(n)[worker]`` returns, so it does not depend
    on how many workers exist or in which order they start.
    """
    return np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(int(worker),))


def split_rng(seed: int, worker: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(split_seed(seed, worker)))
