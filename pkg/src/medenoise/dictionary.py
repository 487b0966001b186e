"""Overcomplete DCT dictionaries, OMP sparse coding and K-SVD atom updates."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import DenoiseError, as_3d
from .patching import PatchSet

logger = logging.getLogger(__name__)

NORM_TOL = 1e-10
GRAM_TOL = 1e-12
EXACT_RTOL = 1e-12


class NotFactorizable(DenoiseError):
    pass


class DegenerateSupport(DenoiseError):
    pass


class IndexOutOfRange(DenoiseError):
    pass


class SvdFailure(DenoiseError):
    pass


class KsvdMonotonicityError(DenoiseError):
    pass


class EncodeError(DenoiseError):
    """OMP failure for one patch of a batch."""

    def __init__(self, patch_index, cause):
        self.patch_index = patch_index
        self.cause = cause
        super().__init__(f"patch {patch_index}: {type(cause).__name__}: {cause}")


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Column-normalized atom matrix of shape ``(m, k)``.

    ``usage`` holds how many patches used each atom during the last K-SVD sweep.
    """

    atoms: np.ndarray
    usage: Optional[np.ndarray] = None
    patch_shape: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64, copy=True)
        if atoms.ndim != 2:
            raise ValueError(f"atoms must be a matrix, got shape {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("dictionary contains non-finite entries")
        norms = np.linalg.norm(atoms, axis=0)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(f"atom {bad} has norm {norms[bad]!r}, expected 1")
        atoms.setflags(write=False)
        usage = np.zeros(atoms.shape[1], dtype=np.int64) if self.usage is None else np.array(self.usage, dtype=np.int64)
        usage.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "usage", usage)
        if self.patch_shape is not None:
            ps = as_3d(self.patch_shape)
            if int(np.prod(ps)) != atoms.shape[0]:
                raise ValueError(f"patch shape {ps} does not match atom length {atoms.shape[0]}")
            object.__setattr__(self, "patch_shape", ps)

    @property
    def m(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[1]

    @property
    def is_overcomplete(self) -> bool:
        return self.k > self.m


@dataclass(frozen=True, eq=False)
class SparseCode:
    support: Tuple[int, ...]
    coeffs: np.ndarray
    patch_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(int(i) for i in self.support))
        coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "coeffs", coeffs)
        if len(self.support) != len(coeffs):
            raise ValueError("support and coeffs have different lengths")
        if len(set(self.support)) != len(self.support):
            raise ValueError("support indices must be unique")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("non-finite coefficient")


def _atoms(D) -> np.ndarray:
    return D.atoms if isinstance(D, Dictionary) else np.asarray(D, dtype=np.float64)


# --- initial dictionary --------------------------------------------------------------------

def factor_atoms(patch_shape, k: int) -> Tuple[int, int, int]:
    """Split ``k`` into per-axis atom counts ``k_a >= n_a``.

    Axes of length 1 get one atom. Among valid splits, the one whose per-axis
    oversampling ``k_a / n_a`` is most uniform wins; remaining ties go to the
    lexicographically smallest split.
    """
    shape = as_3d(patch_shape)
    active = [a for a, n in enumerate(shape) if n > 1]
    m = int(np.prod(shape))
    if k < m:
        raise NotFactorizable(f"k = {k} is smaller than the patch length {m}")
    if not active:
        if k == 1:
            return (1, 1, 1)
        raise NotFactorizable("a 1-voxel patch supports exactly one atom")
    target = math.log(k / m) / len(active)
    divisors = [d for d in range(1, k + 1) if k % d == 0]
    best = None
    for combo in itertools.product(divisors, repeat=len(active)):
        if int(np.prod(combo)) != k:
            continue
        if any(c < shape[a] for c, a in zip(combo, active)):
            continue
        score = sum((math.log(c / shape[a]) - target) ** 2 for c, a in zip(combo, active))
        key = (round(score, 12), combo)
        if best is None or key < best:
            best = key
    if best is None:
        raise NotFactorizable(f"no per-axis split of k = {k} covers patch {shape}")
    counts = [1, 1, 1]
    for c, a in zip(best[1], active):
        counts[a] = c
    return tuple(counts)


def dct_1d(n: int, k: int) -> np.ndarray:
    """``n x k`` oversampled cosine basis; columns after the first are mean-removed."""
    x = np.arange(n) + 0.5
    basis = np.cos(np.pi * np.outer(x, np.arange(k)) / k)
    if k > 1:
        basis[:, 1:] -= basis[:, 1:].mean(axis=0)
    return basis / np.linalg.norm(basis, axis=0)


def dct_init(patch_shape, k: int) -> Dictionary:
    """Separable overcomplete DCT dictionary for patches of ``patch_shape``.

    Atom ``(i, j, l)`` is the outer product of the 1D cosines along x, y, z and
    sits at column ``(i * ky + j) * kz + l``, matching C-order patch vectors.
    """
    shape = as_3d(patch_shape)
    counts = factor_atoms(shape, k)
    bases = [dct_1d(n, c) for n, c in zip(shape, counts)]
    atoms = np.einsum("ai,bj,cl->abcijl", *bases).reshape(int(np.prod(shape)), k)
    atoms /= np.linalg.norm(atoms, axis=0)
    return Dictionary(atoms, patch_shape=shape)


# --- sparse coding -------------------------------------------------------------------------

def omp_encode(D, p, s: int, eps: float = 0.0, patch_index: int = 0, trace: Optional[list] = None) -> SparseCode:
    """Orthogonal matching pursuit.

    Greedily adds the atom most correlated with the residual (lowest index on
    ties), refits all coefficients by least squares, and stops at ``s`` atoms,
    at ``||residual|| <= eps`` (or at rounding level, ``EXACT_RTOL * ||p||``)
    or when no atom correlates with the residual.
    Residual norms per iteration are appended to ``trace`` when given.
    """
    A = _atoms(D)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape[0] != A.shape[0]:
        raise ValueError(f"patch length {p.shape[0]} does not match atom length {A.shape[0]}")
    if s < 1 or eps < 0:
        raise ValueError("need s >= 1 and eps >= 0")
    support: List[int] = []
    coeffs = np.zeros(0)
    residual = p
    rnorm = float(np.linalg.norm(residual))
    # a residual at rounding level is an exact fit
    stop = max(eps, EXACT_RTOL * rnorm)
    if trace is not None:
        trace.append(rnorm)
    while len(support) < s and rnorm > stop:
        corr = A.T @ residual
        i = int(np.argmax(np.abs(corr)))
        if corr[i] == 0.0 or i in support:
            break
        support.append(i)
        sub = A[:, support]
        gram = sub.T @ sub
        if np.linalg.eigvalsh(gram)[0] < GRAM_TOL:
            raise DegenerateSupport(f"support {support} has a singular Gram matrix")
        coeffs = np.linalg.lstsq(sub, p, rcond=None)[0]
        residual = p - sub @ coeffs
        rnorm = float(np.linalg.norm(residual))
        if trace is not None:
            trace.append(rnorm)
    return SparseCode(tuple(support), coeffs, patch_index)


def _chunks(n: int, workers: int):
    bounds = np.linspace(0, n, max(1, workers) + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def batch_encode(D, ps, s: int, eps=0.0, workers: int = 1) -> List[SparseCode]:
    """OMP over every patch of ``ps`` (a :class:`PatchSet` or ``(m, r)`` matrix).

    ``eps`` is a scalar or one tolerance per patch.

    Each patch is coded independently, so the result is the same for any
    ``workers``; chunks are joined back in patch order.
    """
    mat = ps.as_matrix() if isinstance(ps, PatchSet) else np.asarray(ps, dtype=np.float64)
    A = _atoms(D)
    tol = np.broadcast_to(np.asarray(eps, dtype=np.float64), (mat.shape[1],))

    def run(lo, hi):
        out = []
        for j in range(lo, hi):
            try:
                out.append(omp_encode(A, mat[:, j], s, float(tol[j]), patch_index=j))
            except DenoiseError as exc:
                raise EncodeError(j, exc) from exc
        return out

    spans = _chunks(mat.shape[1], workers)
    if workers <= 1 or len(spans) <= 1:
        return [c for lo, hi in spans for c in run(lo, hi)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda span: run(*span), spans))
    return [c for part in parts for c in part]


def reconstruct(D, code: SparseCode) -> np.ndarray:
    A = _atoms(D)
    out = np.zeros(A.shape[0])
    for i, c in zip(code.support, code.coeffs):
        if not 0 <= i < A.shape[1]:
            raise IndexOutOfRange(f"atom index {i} outside [0, {A.shape[1]})")
        out += c * A[:, i]
    return out


def reconstruct_all(D, codes: Sequence[SparseCode]) -> np.ndarray:
    """Reconstructions of all codes as columns of an ``(m, r)`` matrix."""
    A = _atoms(D)
    coef, _ = codes_to_matrix(codes, A.shape[1])
    return A @ coef


def codes_to_matrix(codes: Sequence[SparseCode], k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Dense ``(k, r)`` coefficients and the boolean support mask."""
    coef = np.zeros((k, len(codes)))
    mask = np.zeros((k, len(codes)), dtype=bool)
    for j, code in enumerate(codes):
        if code.support:
            idx = np.asarray(code.support)
            if idx.min() < 0 or idx.max() >= k:
                raise IndexOutOfRange(f"code {j} references atoms outside [0, {k})")
            coef[idx, j] = code.coeffs
            mask[idx, j] = True
    return coef, mask


def matrix_to_codes(coef: np.ndarray, mask: np.ndarray, template: Sequence[SparseCode]) -> List[SparseCode]:
    """Inverse of :func:`codes_to_matrix`, keeping each template's support order."""
    return [SparseCode(c.support, coef[list(c.support), j], c.patch_index) for j, c in enumerate(template)]


def representation_error(D, ps, codes) -> float:
    """Total squared error ``sum_j ||P_j - D a_j||^2``."""
    mat = ps.as_matrix() if isinstance(ps, PatchSet) else np.asarray(ps, dtype=np.float64)
    return float(np.sum((mat - reconstruct_all(D, codes)) ** 2))


# --- K-SVD ---------------------------------------------------------------------------------

@dataclass
class KsvdHistory:
    """Trace of a K-SVD run.

    ``errors`` starts with the error before the first atom update and then
    records the total error after every atom update; ``sweep_errors`` holds the
    error after each post-sweep re-encode.
    """

    errors: List[float] = field(default_factory=list)
    sweep_errors: List[float] = field(default_factory=list)
    replaced: List[Tuple[int, int]] = field(default_factory=list)
    aborted_sweeps: List[int] = field(default_factory=list)


def _sign_fix(u: np.ndarray, v: np.ndarray):
    i = int(np.argmax(np.abs(u)))
    if u[i] < 0:
        return -u, -v
    return u, v


def ksvd_update(D, ps, codes, sweeps: int = 1, s: Optional[int] = None, eps: float = 0.0,
                workers: int = 1, monotone_tol: float = 1e-9, history: Optional[KsvdHistory] = None,
                fixed: Sequence[int] = (), keep_better: bool = False):
    """Run ``sweeps`` K-SVD sweeps; returns ``(Dictionary, codes, KsvdHistory)``.

    Atoms are updated in index order with supports held fixed; an atom nobody
    uses is replaced by the normalized worst-represented patch (each patch is
    used at most once per sweep). After every sweep all patches are re-coded
    with OMP using ``s`` (default: the largest current support, at least 1)
    and ``eps``. A rise in the total error during an atom update beyond
    ``monotone_tol`` (relative) raises :class:`KsvdMonotonicityError`.

    With ``keep_better`` a patch keeps its updated K-SVD code whenever that fits
    better than the fresh OMP code, so the total error never rises across
    sweeps. Atoms in ``fixed`` are left untouched.
    """
    mat = ps.as_matrix() if isinstance(ps, PatchSet) else np.asarray(ps, dtype=np.float64)
    atoms = np.array(_atoms(D), copy=True)
    patch_shape = D.patch_shape if isinstance(D, Dictionary) else None
    k = atoms.shape[1]
    if len(codes) != mat.shape[1]:
        raise ValueError(f"{len(codes)} codes for {mat.shape[1]} patches")
    if s is None:
        s = max([len(c.support) for c in codes] + [1])
    hist = history if history is not None else KsvdHistory()
    usage = np.zeros(k, dtype=np.int64)
    fixed = set(int(i) for i in fixed)

    for sweep in range(sweeps):
        coef, mask = codes_to_matrix(codes, k)
        resid = mat - atoms @ coef
        err = np.einsum("ij,ij->j", resid, resid)
        total = float(err.sum())
        hist.errors.append(total)
        usage = mask.sum(axis=1)
        taken = np.zeros(mat.shape[1], dtype=bool)
        for i in range(k):
            if i in fixed:
                hist.errors.append(total)
                continue
            users = np.flatnonzero(mask[i])
            if users.size == 0:
                cand = np.where(taken, -1.0, err)
                j = int(np.argmax(cand))
                norm = float(np.linalg.norm(mat[:, j]))
                if cand[j] > (EXACT_RTOL * norm) ** 2:
                    atoms[:, i] = mat[:, j] / norm
                    taken[j] = True
                    hist.replaced.append((i, j))
                hist.errors.append(total)
                continue
            E = resid[:, users] + np.outer(atoms[:, i], coef[i, users])
            before = float(err[users].sum())
            try:
                u, sv, vt = np.linalg.svd(E, full_matrices=False)
            except np.linalg.LinAlgError as exc:
                logger.warning("SVD failed on atom %d in sweep %d: %s", i, sweep, exc)
                hist.aborted_sweeps.append(sweep)
                break
            d, x = _sign_fix(u[:, 0], sv[0] * vt[0])
            atoms[:, i] = d / np.linalg.norm(d)
            coef[i, users] = x
            resid[:, users] = E - np.outer(atoms[:, i], x)
            err[users] = np.einsum("ij,ij->j", resid[:, users], resid[:, users])
            after = float(err[users].sum())
            if after > before + monotone_tol * max(1.0, before):
                raise KsvdMonotonicityError(
                    f"atom {i}, sweep {sweep}: error rose from {before!r} to {after!r}")
            total = total - before + after
            hist.errors.append(total)
        fresh = batch_encode(atoms, mat, s, eps, workers)
        if keep_better:
            fresh = [_better(new, mask[:, j], coef[:, j], err[j], atoms, mat[:, j], j)
                     for j, new in enumerate(fresh)]
        codes = fresh
        hist.sweep_errors.append(representation_error(atoms, mat, codes))
    return Dictionary(atoms, usage, patch_shape), codes, hist


def _better(new: SparseCode, mask_col, coef_col, err_old: float, atoms, p, j: int) -> SparseCode:
    r = p - reconstruct(atoms, new)
    if float(r @ r) <= err_old:
        return new
    support = tuple(int(i) for i in np.flatnonzero(mask_col))
    return SparseCode(support, coef_col[list(support)].copy(), j)


def refit_targets(ps: PatchSet, r_avg: np.ndarray, intensity_max: float) -> PatchSet:
    """Pseudo-clean targets ``clamp(P_j - R_avg_j, 0, intensity_max)``."""
    return ps.map(np.clip(ps.patches - np.asarray(r_avg).reshape(ps.patches.shape), 0.0, intensity_max))


def residue_coupled_refit(D, ps: PatchSet, codes, r_avg, intensity_max: float, s: int, eps: float,
                          sweeps: int = 1, workers: int = 1, fixed: Sequence[int] = (), keep_better: bool = True):
    """Refit the dictionary so that its residue tracks the fused residue.

    The targets ``T_j = clamp(P_j - R_avg_j)`` are coded with OMP and K-SVD is
    run on them, which minimizes ``sum_j ||T_j - D a_j||^2``, i.e. the distance
    between the dictionary residue ``P_j - D a_j`` and ``R_avg_j``.

    With ``keep_better`` each target keeps whichever of its fresh OMP code and
    a least-squares refit on its incoming support fits better, both before the
    sweeps and after each re-coding, so the refit error never rises above what
    the incoming codes give. Without it this is plain ``batch_encode`` followed
    by :func:`ksvd_update` on the targets. Returns
    ``(Dictionary, codes, KsvdHistory, targets)``.
    """
    targets = refit_targets(ps, r_avg, intensity_max)
    tmat = targets.as_matrix()
    A = _atoms(D)
    chosen = batch_encode(A, tmat, s, eps, workers)
    if keep_better:
        for j, (new, old) in enumerate(zip(chosen, codes)):
            t = tmat[:, j]
            err_new = float(np.sum((t - reconstruct(A, new)) ** 2))
            if old.support:
                sub = A[:, list(old.support)]
                refit = SparseCode(old.support, np.linalg.lstsq(sub, t, rcond=None)[0], j)
                err_old = float(np.sum((t - sub @ refit.coeffs) ** 2))
            else:
                refit, err_old = SparseCode((), np.zeros(0), j), float(t @ t)
            if err_old < err_new:
                chosen[j] = refit
    newD, new_codes, hist = ksvd_update(D, targets, chosen, sweeps=sweeps, s=s, eps=eps, workers=workers,
                                        fixed=fixed, keep_better=keep_better)
    return newD, new_codes, hist, targets


def dictionary_mosaic(D: Dictionary, patch_shape=None, cols: Optional[int] = None, pad: int = 1) -> np.ndarray:
    """Tile atoms into a 2D image, each atom rescaled to ``[0, 1]``.

    3D atoms are laid out with their z-slices side by side.
    """
    shape = as_3d(patch_shape if patch_shape is not None else D.patch_shape)
    px, py, pz = shape
    tile_w = py * pz + (pz - 1)
    k = D.k
    cols = cols or int(math.ceil(math.sqrt(k)))
    rows = int(math.ceil(k / cols))
    out = np.ones((rows * (px + pad) + pad, cols * (tile_w + pad) + pad))
    for i in range(k):
        a = D.atoms[:, i].reshape(shape)
        lo, hi = a.min(), a.max()
        a = (a - lo) / (hi - lo) if hi > lo else np.full(shape, 0.5)
        r, c = divmod(i, cols)
        y0, x0 = pad + r * (px + pad), pad + c * (tile_w + pad)
        for z in range(pz):
            xs = x0 + z * (py + 1)
            out[y0:y0 + px, xs:xs + py] = a[:, :, z]
    return out
