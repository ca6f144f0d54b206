import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cginverse import metrics


def _rand_image(seed, side=16):
    return np.random.default_rng(seed).random((side, side))


def test_window_sums_to_one():
    w = metrics.gaussian_window(11, 1.5)
    assert abs(w.sum() - 1.0) < 1e-12
    wm = metrics._smoothing_matrix(16, 11, 1.5)
    assert np.max(np.abs(wm.sum(axis=1) - 1.0)) < 1e-12


def test_ssim_self_is_one():
    x = _rand_image(0)
    assert metrics.ssim(x, x) == 1.0


def test_ssim_symmetric():
    x, y = _rand_image(1), _rand_image(2)
    assert abs(metrics.ssim(x, y) - metrics.ssim(y, x)) < 1e-12


def test_ssim_constant_images_closed_form():
    p = metrics.DEFAULT_SSIM
    mx, my = 0.25, 0.75  # differ by 0.5 on unit range
    x = np.full((16, 16), mx)
    y = np.full((16, 16), my)
    c1 = (p.k1 * p.dynamic_range) ** 2
    want = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
    assert metrics.ssim(x, y) == pytest.approx(want, abs=1e-12)


def test_ssim_range_on_random_pairs():
    rng = np.random.default_rng(3)
    for _ in range(200):
        x, y = rng.random((8, 8)), rng.random((8, 8))
        v = metrics.ssim(x, y)
        assert -1.0 <= v <= 1.0
        assert (v == 1.0) == np.array_equal(x, y)


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError, match="shapes"):
        metrics.ssim(np.zeros((4, 4)), np.zeros((5, 5)))


def test_ssim_grad_matches_fd():
    rng = np.random.default_rng(5)
    x, y = rng.random((8, 8)), rng.random((8, 8))
    _, g = metrics.ssim_with_grad(x, y)
    h = 1e-6
    for idx in [(0, 0), (3, 5), (7, 7)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (metrics.ssim(xp, y) - metrics.ssim(xm, y)) / (2 * h)
        assert g[idx] == pytest.approx(fd, abs=1e-8)


def test_psnr_identical_inf():
    x = _rand_image(0)
    assert metrics.psnr(x, x) == float("inf")


def test_psnr_offset_closed_form():
    x = np.full((8, 8), 0.4)
    assert metrics.psnr(x, x + 0.1, peak=1.0) == pytest.approx(20.0, abs=1e-10)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(7)
    x = rng.random((16, 16))
    base = x + 0.01 * rng.standard_normal((16, 16))
    for _ in range(100):
        noisier = base + 0.05 * rng.standard_normal((16, 16))
        assert metrics.psnr(x, noisier) < metrics.psnr(x, base)


def test_psnr_mse_consistency():
    rng = np.random.default_rng(8)
    x, y = rng.random((12, 12)), rng.random((12, 12))
    mse = np.mean((x - y) ** 2)
    peak = 2.0
    want = -10 * np.log10(mse) + 20 * np.log10(peak)
    assert metrics.psnr(x, y, peak) == pytest.approx(want, abs=1e-10)


def test_mean_ci99_equal_values():
    mean, hw = metrics.mean_ci99([0.7, 0.7, 0.7])
    assert mean == pytest.approx(0.7, abs=1e-15)
    assert hw == pytest.approx(0.0, abs=1e-15)


def test_mean_ci99_two_values():
    mean, hw = metrics.mean_ci99([0.0, 1.0])
    assert mean == 0.5
    assert hw == pytest.approx(2.576 * 0.7071067811865476 / 1.4142135623730951, rel=1e-12)


def test_mean_ci99_rejects_short():
    with pytest.raises(ValueError):
        metrics.mean_ci99([1.0])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.floats(0.1, 10))
@settings(max_examples=50, deadline=None)
def test_mean_ci99_scales_linearly(values, factor):
    mean, hw = metrics.mean_ci99(values)
    mean2, hw2 = metrics.mean_ci99([factor * v for v in values])
    assert mean2 == pytest.approx(factor * mean, rel=1e-9, abs=1e-9)
    assert hw2 == pytest.approx(factor * hw, rel=1e-9, abs=1e-9)
