import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from medenoise.core import ImageVolume
from medenoise.metrics import MetricReport, ShapeMismatch, TooSmall, evaluate, gaussian_window, psnr, rmse, ssim


def loop_rmse(a, b):
    total, n = 0.0, 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            d = float(a[i, j]) - float(b[i, j])
            total += d * d
            n += 1
    return math.sqrt(total / n)


def test_psnr_offset_is_twenty_db(rng):
    a = rng.uniform(0, 200, (32, 32))
    assert psnr(a, a + 25.5, 255.0) == pytest.approx(20.0, abs=1e-12)
    assert evaluate(ImageVolume(a), ImageVolume(a + 25.5)).lines()[0] == "PSNR 20.000"


def test_identical_inputs(rng):
    a = rng.uniform(0, 255, (24, 24))
    rep = evaluate(a, a)
    assert rep.psnr_infinite
    assert rep.lines() == ["PSNR inf", "SSIM 1.000", "RMSE 0.000"]
    assert ssim(a, a) == 1.0


def test_rmse_matches_double_loop():
    for seed in range(20):
        r = np.random.default_rng(seed)
        shape = tuple(r.integers(3, 30, 2))
        a, b = r.uniform(-50, 300, shape), r.uniform(-50, 300, shape)
        assert abs(rmse(a, b) - loop_rmse(a, b)) < 1e-12


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        rmse(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_too_small():
    with pytest.raises(TooSmall):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_window():
    w = gaussian_window()
    assert w.shape == (11,) and w.sum() == pytest.approx(1.0) and np.argmax(w) == 5


def test_ssim_constant_images():
    # flat images: structure terms reduce to the luminance ratio
    a, b = np.full((16, 16), 100.0), np.full((16, 16), 50.0)
    c1 = (0.01 * 255) ** 2
    assert ssim(a, b) == pytest.approx((2 * 100 * 50 + c1) / (100**2 + 50**2 + c1), rel=1e-12)


def test_ssim_3d_is_mean_of_slices(rng):
    a = rng.uniform(0, 255, (16, 16, 3))
    b = a + rng.normal(0, 10, a.shape)
    per = [ssim(a[:, :, z], b[:, :, z]) for z in range(3)]
    assert ssim(a, b) == pytest.approx(np.mean(per), rel=1e-12)


def test_noise_lowers_ssim(rng):
    a = rng.uniform(0, 255, (32, 32))
    assert ssim(a, a + rng.normal(0, 5, a.shape)) > ssim(a, a + rng.normal(0, 30, a.shape))


def test_report_format():
    rep = MetricReport(31.23456, 0.87654, 7.0, 255.0)
    assert rep.lines() == ["PSNR 31.235", "SSIM 0.877", "RMSE 7.000"]


images = hnp.arrays(np.float64, (12, 12), elements=st.floats(0, 255))


@given(images, images)
def test_metrics_symmetric(a, b):
    assert rmse(a, b) == rmse(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


@given(images, images)
def test_ssim_bounded(a, b):
    assert -1 - 1e-12 <= ssim(a, b) <= 1 + 1e-12


@given(images, images)
def test_psnr_consistent_with_rmse(a, b):
    e = rmse(a, b)
    p = psnr(a, b)
    assert (e == 0 and math.isinf(p)) or p == pytest.approx(20 * math.log10(255 / e))
