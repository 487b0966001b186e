import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from medenoise import dictionary as dl
from medenoise.core import ImageVolume
from medenoise.dictionary import (DegenerateSupport, Dictionary, IndexOutOfRange, KsvdMonotonicityError,
                                  NotFactorizable, SparseCode)
from medenoise.patching import PatchSet, decompose, make_grid


def unit_columns(a):
    return a / np.linalg.norm(a, axis=0)


def random_dictionary(rng, m, k):
    return unit_columns(rng.normal(size=(m, k)))


# --- DCT -----------------------------------------------------------------------------------

def test_dct_8x8_256_unit_norm():
    D = dl.dct_init((8, 8), 256)
    assert D.atoms.shape == (64, 256)
    assert np.allclose(np.linalg.norm(D.atoms, axis=0), 1.0, atol=1e-12)
    assert D.is_overcomplete


def test_dct_dc_atom_is_constant():
    D = dl.dct_init((8, 8), 256)
    assert np.allclose(D.atoms[:, 0], 1.0 / 8.0, atol=1e-15)


def test_dct_atoms_distinct():
    G = dl.dct_init((8, 8), 256).atoms
    gram = np.abs(G.T @ G)
    np.fill_diagonal(gram, 0.0)
    assert gram.max() < 1 - 1e-9


def test_dct_non_dc_atoms_zero_mean():
    A = dl.dct_init((8, 8, 4), 1024).atoms
    assert np.allclose(A[:, 1:].mean(axis=0), 0.0, atol=1e-12)


def test_dct_separable_against_direct_cosines():
    # oracle: build atom (i, j) directly from the cosine formula
    D = dl.dct_init((4, 4), 36)
    kx, ky, _ = dl.factor_atoms((4, 4, 1), 36)
    x = np.arange(4) + 0.5
    i, j = 2, 3
    cx = np.cos(np.pi * i * x / kx)
    cy = np.cos(np.pi * j * x / ky)
    cx, cy = cx - cx.mean(), cy - cy.mean()
    atom = np.outer(cx, cy).ravel()
    atom /= np.linalg.norm(atom)
    assert np.allclose(D.atoms[:, i * ky + j], atom, atol=1e-12)


def test_factorization():
    assert dl.factor_atoms((8, 8, 1), 256) == (16, 16, 1)
    kx, ky, kz = dl.factor_atoms((8, 8, 4), 1024)
    assert kx * ky * kz == 1024 and kx >= 8 and ky >= 8 and kz >= 4
    with pytest.raises(NotFactorizable):
        dl.factor_atoms((8, 8, 1), 63)
    with pytest.raises(NotFactorizable):
        dl.factor_atoms((8, 8, 1), 4 * 67)


def test_dictionary_rejects_unnormalized():
    with pytest.raises(ValueError):
        Dictionary(np.ones((4, 5)))


# --- OMP -----------------------------------------------------------------------------------

def test_omp_identity():
    c = dl.omp_encode(np.eye(2), [3.0, 0.0], 1)
    assert c.support == (0,)
    assert np.allclose(c.coeffs, [3.0])


def test_omp_diagonal_atom_beats_axes():
    A = np.array([[1.0, 0.0, 1 / math.sqrt(2)], [0.0, 1.0, 1 / math.sqrt(2)]])
    p = np.array([1.0, 1.0])
    c = dl.omp_encode(A, p, 1)
    # brute force over every 1-sparse least-squares fit
    errs = [np.linalg.norm(p - A[:, i] * (A[:, i] @ p)) for i in range(3)]
    assert c.support == (int(np.argmin(errs)),) == (2,)
    assert c.coeffs[0] == pytest.approx(math.sqrt(2))
    assert np.linalg.norm(p - dl.reconstruct(A, c)) < 1e-12


def test_omp_tie_goes_to_lowest_index():
    A = np.array([[1.0, 0.0], [0.0, 1.0]])
    c = dl.omp_encode(A, [2.0, 2.0], 1)
    assert c.support == (0,)


def test_omp_degenerate_support():
    d = 1e-7
    a = np.array([[1.0, math.cos(d)], [0.0, math.sin(d)]])
    with pytest.raises(DegenerateSupport):
        dl.omp_encode(a, [1.0, 1.0], 2)


def test_omp_zero_patch_empty():
    c = dl.omp_encode(np.eye(3), np.zeros(3), 2)
    assert c.support == ()


def test_omp_exact_recovery_planted(rng):
    recovered, trials = 0, 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        A = random_dictionary(r, 16, 64)
        gram = np.abs(A.T @ A)
        np.fill_diagonal(gram, 0.0)
        if gram.max() >= 1 / 5:
            continue
        trials += 1
        support = r.choice(64, 3, replace=False)
        alpha = np.zeros(64)
        alpha[support] = r.normal(size=3)
        c = dl.omp_encode(A, A @ alpha, 3)
        est = np.zeros(64)
        est[list(c.support)] = c.coeffs
        recovered += set(c.support) == set(support) and np.max(np.abs(est - alpha)) < 1e-8
    assert recovered == trials


def test_omp_exact_recovery_incoherent_pair():
    # identity plus normalized Hadamard: coherence 1/8 < 1/(2s - 1) for s = 3
    from scipy.linalg import hadamard
    A = np.hstack([np.eye(64), hadamard(64) / 8.0])
    for seed in range(100):
        r = np.random.default_rng(seed)
        support = r.choice(128, 3, replace=False)
        alpha = np.zeros(128)
        alpha[support] = r.normal(size=3) + np.sign(r.normal(size=3))
        c = dl.omp_encode(A, A @ alpha, 3)
        est = np.zeros(128)
        est[list(c.support)] = c.coeffs
        assert set(c.support) == set(support)
        assert np.max(np.abs(est - alpha)) < 1e-8


def test_omp_full_support_reconstructs(rng):
    A = np.hstack([np.eye(8), random_dictionary(rng, 8, 8)])
    p = rng.normal(size=8)
    c = dl.omp_encode(A, p, 8)
    assert np.allclose(dl.reconstruct(A, c), p, atol=1e-8)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_omp_residual_strictly_decreases(seed, s):
    r = np.random.default_rng(seed)
    A = random_dictionary(r, 12, 30)
    trace = []
    c = dl.omp_encode(A, r.normal(size=12), s, trace=trace)
    assert len(trace) == len(c.support) + 1
    assert all(b < a for a, b in zip(trace, trace[1:]))


@given(st.integers(0, 2**32 - 1))
def test_omp_one_atom_is_best_single_fit(seed):
    r = np.random.default_rng(seed)
    A = random_dictionary(r, 10, 25)
    p = r.normal(size=10)
    c = dl.omp_encode(A, p, 1)
    got = np.linalg.norm(p - dl.reconstruct(A, c))
    best = min(np.linalg.norm(p - A[:, i] * (A[:, i] @ p)) for i in range(25))
    assert got <= best + 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.floats(0, 2))
def test_codes_respect_sparsity(seed, s, eps):
    r = np.random.default_rng(seed)
    A = random_dictionary(r, 9, 20)
    c = dl.omp_encode(A, r.normal(size=9), s, eps)
    assert len(c.support) <= s
    assert len(set(c.support)) == len(c.support)
    assert all(0 <= i < 20 for i in c.support)


# --- batch / reconstruct -------------------------------------------------------------------

def test_batch_zero_patches_empty():
    codes = dl.batch_encode(dl.dct_init((4, 4), 16), np.zeros((16, 5)), 3)
    assert all(c.support == () for c in codes)


def test_batch_single_matches_omp(rng):
    A = random_dictionary(rng, 16, 40)
    p = rng.normal(size=16)
    (c,) = dl.batch_encode(A, p[:, None], 4)
    d = dl.omp_encode(A, p, 4)
    assert c.support == d.support and np.array_equal(c.coeffs, d.coeffs)


def test_batch_workers_identical(rng):
    A = random_dictionary(rng, 16, 40)
    P = rng.normal(size=(16, 57))
    one = dl.batch_encode(A, P, 4, 0.1, workers=1)
    eight = dl.batch_encode(A, P, 4, 0.1, workers=8)
    for a, b in zip(one, eight):
        assert a.support == b.support and np.array_equal(a.coeffs, b.coeffs)
        assert a.patch_index == b.patch_index


def test_batch_error_carries_patch_index():
    d = 1e-7
    A = np.array([[1.0, math.cos(d)], [0.0, math.sin(d)]])
    P = np.array([[1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(dl.EncodeError) as err:
        dl.batch_encode(A, P, 2)
    assert err.value.patch_index == 1


def test_reconstruct_empty_and_identity():
    assert np.array_equal(dl.reconstruct(np.eye(3), SparseCode((), [])), np.zeros(3))
    assert np.array_equal(dl.reconstruct(np.eye(3), SparseCode((0,), [3.0])), [3.0, 0.0, 0.0])


def test_reconstruct_out_of_range():
    with pytest.raises(IndexOutOfRange):
        dl.reconstruct(np.eye(3), SparseCode((5,), [1.0]))


# --- K-SVD ---------------------------------------------------------------------------------

def test_ksvd_single_patch_does_not_get_worse(rng):
    D = dl.dct_init((4, 4), 32)
    p = rng.normal(size=(16, 1))
    codes = dl.batch_encode(D, p, 2)
    before = dl.representation_error(D, p, codes)
    D2, codes2, _ = dl.ksvd_update(D, p, codes, 1, 2)
    assert dl.representation_error(D2, p, codes2) <= before + 1e-12


def test_ksvd_planted_recovery():
    # 1-sparse planted model: greedy coding is exact on the true atoms, so
    # K-SVD from a perturbed start has a zero-error fixed point to reach
    for seed in range(4):
        r = np.random.default_rng(seed)
        Dp = random_dictionary(r, 16, 32)
        X = np.zeros((32, 200))
        for j in range(200):
            i = r.integers(32)
            X[i, j] = r.normal() + 2 * np.sign(r.normal())
        P = Dp @ X
        D0 = unit_columns(Dp + 0.1 * r.normal(size=Dp.shape))
        codes = dl.batch_encode(D0, P, 1)
        D, codes, _ = dl.ksvd_update(D0, P, codes, 20, 1)
        rmse = math.sqrt(dl.representation_error(D, P, codes) / P.size)
        assert rmse < 1e-6


def test_ksvd_unused_atoms_take_worst_patches(rng):
    # no patch uses any atom, so atom i receives the i-th worst patch
    P = rng.normal(size=(16, 40)) * rng.uniform(0.5, 3.0, size=40)
    D = dl.dct_init((4, 4), 16)
    codes = [SparseCode((), [], j) for j in range(40)]
    D2, _, hist = dl.ksvd_update(D, P, codes, 1, 2)
    order = np.argsort(-np.sum(P * P, axis=0), kind="stable")
    assert np.allclose(D2.atoms[:, 5], P[:, order[5]] / np.linalg.norm(P[:, order[5]]))
    assert [j for _, j in hist.replaced] == list(order[:16])


def test_ksvd_atom_sign_convention(rng):
    P = rng.normal(size=(16, 60))
    D = dl.dct_init((4, 4), 32)
    D2, _, _ = dl.ksvd_update(D, P, dl.batch_encode(D, P, 3), 2, 3)
    for a in D2.atoms.T:
        assert a[np.argmax(np.abs(a))] > 0


def test_ksvd_fixed_atom_untouched(rng):
    P = rng.normal(size=(16, 60)) + 5.0
    D = dl.dct_init((4, 4), 32)
    D2, _, _ = dl.ksvd_update(D, P, dl.batch_encode(D, P, 3), 2, 3, fixed=(0,))
    assert np.array_equal(D2.atoms[:, 0], D.atoms[:, 0])


@given(st.integers(0, 2**32 - 1))
def test_ksvd_error_never_rises_per_atom(seed):
    r = np.random.default_rng(seed)
    P = r.normal(size=(16, 30))
    D = dl.dct_init((4, 4), 32)
    _, _, hist = dl.ksvd_update(D, P, dl.batch_encode(D, P, 3), 2, 3)
    per_sweep = len(hist.errors) // 2
    for sweep in range(2):
        seq = hist.errors[sweep * per_sweep:(sweep + 1) * per_sweep]
        assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(seq, seq[1:]))


@given(st.integers(0, 2**32 - 1))
def test_ksvd_keeps_unit_norm(seed):
    r = np.random.default_rng(seed)
    P = r.normal(size=(16, 25))
    D = dl.dct_init((4, 4), 32)
    D2, _, _ = dl.ksvd_update(D, P, dl.batch_encode(D, P, 2), 1, 2)
    assert np.allclose(np.linalg.norm(D2.atoms, axis=0), 1.0, atol=1e-10)


def test_ksvd_keep_better_monotone_across_sweeps(rng):
    P = rng.normal(size=(16, 80))
    D = dl.dct_init((4, 4), 32)
    codes = dl.batch_encode(D, P, 3)
    _, _, hist = dl.ksvd_update(D, P, codes, 4, 3, eps=1.0, keep_better=True)
    start = dl.representation_error(D, P, codes)
    errs = [start] + hist.sweep_errors
    assert all(b <= a + 1e-9 * a for a, b in zip(errs, errs[1:]))


def test_ksvd_workers_bitwise_identical(rng):
    P = rng.normal(size=(16, 50))
    D = dl.dct_init((4, 4), 32)
    a = dl.ksvd_update(D, P, dl.batch_encode(D, P, 3), 2, 3, workers=1)[0]
    b = dl.ksvd_update(D, P, dl.batch_encode(D, P, 3, workers=4), 2, 3, workers=4)[0]
    assert np.array_equal(a.atoms, b.atoms)


def test_monotonicity_guard_raises(monkeypatch, rng):
    P = rng.normal(size=(16, 30))
    D = dl.dct_init((4, 4), 32)
    codes = dl.batch_encode(D, P, 3)

    real_svd = np.linalg.svd

    def bad_svd(E, full_matrices=False):
        u, sv, vt = real_svd(E, full_matrices=False)
        return u, sv * 0.5, vt

    monkeypatch.setattr(dl.np.linalg, "svd", bad_svd)
    with pytest.raises(KsvdMonotonicityError):
        dl.ksvd_update(D, P, codes, 1, 3)


# --- residue-coupled refit -----------------------------------------------------------------

def _patchset(rng, shape=(12, 12), patch=(4, 4), stride=(2, 2)):
    vol = ImageVolume(rng.uniform(0, 255, shape))
    return decompose(vol, make_grid(vol.shape, patch, stride))


def test_refit_zero_residue_is_plain_ksvd(rng):
    ps = _patchset(rng)
    D = dl.dct_init((4, 4), 32)
    codes = dl.batch_encode(D, ps, 3, 5.0)
    Da, ca, _, _ = dl.residue_coupled_refit(D, ps, codes, np.zeros_like(ps.patches), 255.0, 3, 5.0,
                                            keep_better=False)
    Db, cb, _ = dl.ksvd_update(D, ps, dl.batch_encode(D, ps, 3, 5.0), 1, 3, 5.0)
    assert np.array_equal(Da.atoms, Db.atoms)
    assert all(x.support == y.support and np.array_equal(x.coeffs, y.coeffs) for x, y in zip(ca, cb))


def test_refit_full_residue_gives_zero_targets(rng):
    ps = _patchset(rng)
    D = dl.dct_init((4, 4), 32)
    codes = dl.batch_encode(D, ps, 3)
    D2, c2, hist, targets = dl.residue_coupled_refit(D, ps, codes, ps.patches, 255.0, 3, 0.0)
    assert np.all(targets.patches == 0.0)
    assert all(c.support == () for c in c2)
    assert np.array_equal(D2.atoms, D.atoms)
    assert hist.replaced == []


def _coupling(D, ps, codes, ravg):
    r1 = ps.patches - dl.reconstruct_all(D, codes).T.reshape(ps.patches.shape)
    return float(np.sum((ravg - r1) ** 2))


def test_refit_lowers_coupling(rng):
    clean = np.kron(rng.uniform(50, 200, (4, 4)), np.ones((4, 4)))
    noisy = clean + rng.normal(0, 8, clean.shape)
    vol = ImageVolume(noisy)
    ps = decompose(vol, make_grid(vol.shape, (4, 4), (2, 2)))
    D = dl.dct_init((4, 4), 32)
    codes = dl.batch_encode(D, ps, 3, 8.0 * 4)
    ravg = 0.5 * (ps.patches - dl.reconstruct_all(D, codes).T.reshape(ps.patches.shape))
    before = _coupling(D, ps, codes, ravg)
    D2, c2, _, _ = dl.residue_coupled_refit(D, ps, codes, ravg, 255.0, 3, 8.0 * 4 / math.sqrt(0.5))
    assert _coupling(D2, ps, c2, ravg) <= before * (1 + 1e-9)


# --- mosaic --------------------------------------------------------------------------------

def test_mosaic_layout():
    D = dl.dct_init((8, 8, 2), 512)
    img = dl.dictionary_mosaic(D)
    cols = math.ceil(math.sqrt(512))
    rows = math.ceil(512 / cols)
    assert img.shape == (rows * 9 + 1, cols * (8 * 2 + 1 + 1) + 1)
    assert img.min() >= 0.0 and img.max() <= 1.0
