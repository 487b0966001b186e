"""Overlapping patch decomposition and mean-aggregation reassembly."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DenoiseError, ImageVolume, PatchGrid, PatchLargerThanVolume


class CoverageHole(DenoiseError):
    pass


def _pad3(shape: Sequence[int]):
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 3:
        raise ValueError(f"expected 1 to 3 axes, got {shape}")
    return shape + (1,) * (3 - len(shape))


def axis_origins(dim: int, patch: int, stride: int) -> list:
    """Origins ``0, stride, 2*stride, ...`` plus ``dim - patch`` if not already hit."""
    last = dim - patch
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def make_grid(volume_shape, patch_shape, stride) -> PatchGrid:
    """Build the patch grid; the final origin on each axis is clamped to the border.

    A stride larger than the patch would leave gaps and raises :class:`CoverageHole`.
    """
    vshape, pshape, st = _pad3(volume_shape), _pad3(patch_shape), _pad3(stride)
    if any(p > v for p, v in zip(pshape, vshape)):
        raise PatchLargerThanVolume(f"patch {pshape} does not fit volume {vshape}")
    if any(p < 1 for p in pshape) or any(s < 1 for s in st):
        raise ValueError(f"patch shape and stride must be positive, got {pshape}, {st}")
    if any(s > p for s, p in zip(st, pshape)):
        raise CoverageHole(f"stride {st} larger than patch {pshape} leaves uncovered voxels")
    per_axis = [axis_origins(v, p, s) for v, p, s in zip(vshape, pshape, st)]
    origins = np.array(list(itertools.product(*per_axis)), dtype=np.int64).reshape(-1, 3)
    origins.setflags(write=False)
    return PatchGrid(vshape, pshape, st, origins)


@dataclass(frozen=True, eq=False)
class PatchSet:
    """Patches of one grid stacked as an ``(r, px, py, pz)`` array, row ``j`` = patch ``j``."""

    grid: PatchGrid
    patches: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.patches, dtype=np.float64)
        expected = (self.grid.n_patches,) + tuple(self.grid.patch_shape)
        if arr.shape != expected:
            raise ValueError(f"patch array shape {arr.shape} does not match grid {expected}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("patch set contains non-finite values")
        object.__setattr__(self, "patches", arr)

    def __len__(self):
        return self.grid.n_patches

    def as_matrix(self) -> np.ndarray:
        """Vectorized patches as columns, shape ``(m, r)``."""
        return self.patches.reshape(len(self), -1).T

    @classmethod
    def from_matrix(cls, grid: PatchGrid, mat: np.ndarray) -> "PatchSet":
        return cls(grid, np.ascontiguousarray(mat.T).reshape((grid.n_patches,) + tuple(grid.patch_shape)))

    def map(self, values) -> "PatchSet":
        return PatchSet(self.grid, values)


def decompose(vol: ImageVolume, grid: PatchGrid) -> PatchSet:
    if tuple(vol.shape) != tuple(grid.volume_shape):
        raise ValueError(f"grid built for {grid.volume_shape}, volume is {vol.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(vol.data, grid.patch_shape)
    o = grid.origins
    return PatchSet(grid, np.array(windows[o[:, 0], o[:, 1], o[:, 2]]))


def assemble_array(ps: PatchSet, volume_shape=None) -> np.ndarray:
    """Average overlapping patches back into a dense array.

    Patches are accumulated strictly in index order, so the result does not
    depend on how the patches were produced.
    """
    grid = ps.grid
    vshape = tuple(grid.volume_shape) if volume_shape is None else _pad3(volume_shape)
    if vshape != tuple(grid.volume_shape):
        raise ValueError(f"grid built for {grid.volume_shape}, asked for {vshape}")
    acc = np.zeros(vshape)
    px, py, pz = grid.patch_shape
    for (x, y, z), patch in zip(grid.origins, ps.patches):
        acc[x:x + px, y:y + py, z:z + pz] += patch
    cov = grid.coverage()
    if np.any(cov == 0):
        raise CoverageHole(f"{int(np.sum(cov == 0))} voxels are not covered by any patch")
    return acc / cov


def assemble(ps: PatchSet, volume_shape=None, intensity_max: float = 255.0, modality="Synthetic") -> ImageVolume:
    return ImageVolume(assemble_array(ps, volume_shape), intensity_max, modality)
