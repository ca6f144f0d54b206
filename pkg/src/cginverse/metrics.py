"""Image quality metrics: SSIM, PSNR, and 99% confidence intervals.

SSIM uses an 11x11 Gaussian window (sigma 1.5), k1=0.01, k2=0.03 and
reflective boundary padding.  The sliding-window smoothing is realized as a
separable pair of explicit 1-D matrices (reflection folded into the matrix),
which keeps the operation exactly linear; the training code exploits this to
derive an exact reverse-mode gradient of the SSIM mean.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0


DEFAULT_SSIM = SsimParams()


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """1-D Gaussian taps normalized to sum exactly to 1."""
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r**2) / (2.0 * sigma**2))
    return w / w.sum()


@lru_cache(maxsize=32)
def _smoothing_matrix(n: int, size: int, sigma: float) -> np.ndarray:
    """n x n matrix applying the Gaussian window along one axis, reflect-padded.

    Reflection is symmetric (edge value repeated): index -1 -> 0, n -> n-1.
    """
    w = gaussian_window(size, sigma)
    half = (size - 1) // 2
    mat = np.zeros((n, n))
    for i in range(n):
        for t in range(-half, half + 1):
            # Symmetric extension has period 2n; fold repeatedly for small n.
            j = (i + t) % (2 * n)
            if j >= n:
                j = 2 * n - 1 - j
            mat[i, j] += w[t + half]
    return mat


def _check_pair(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise ValueError(f"images must be 2-D, got shape {x.shape}")
    return x, y


def _ssim_terms(x, y, p: SsimParams):
    wr = _smoothing_matrix(x.shape[0], p.window_size, p.sigma)
    wc = _smoothing_matrix(x.shape[1], p.window_size, p.sigma)
    smooth = lambda img: wr @ img @ wc.T
    c1 = (p.k1 * p.dynamic_range) ** 2
    c2 = (p.k2 * p.dynamic_range) ** 2
    mx, my = smooth(x), smooth(y)
    sxx = smooth(x * x) - mx * mx
    syy = smooth(y * y) - my * my
    sxy = smooth(x * y) - mx * my
    n1 = 2 * mx * my + c1
    n2 = 2 * sxy + c2
    d1 = mx * mx + my * my + c1
    d2 = sxx + syy + c2
    return wr, wc, mx, my, n1, n2, d1, d2


def ssim(x: np.ndarray, y: np.ndarray, p: SsimParams = DEFAULT_SSIM) -> float:
    """Mean local SSIM over the sliding Gaussian window; in [-1, 1]."""
    x, y = _check_pair(x, y)
    _, _, _, _, n1, n2, d1, d2 = _ssim_terms(x, y, p)
    return float(np.mean((n1 * n2) / (d1 * d2)))


def ssim_with_grad(x: np.ndarray, y: np.ndarray, p: SsimParams = DEFAULT_SSIM):
    """Return (ssim, d ssim / d x) for 2-D images; y is treated as constant."""
    x, y = _check_pair(x, y)
    wr, wc, mx, my, n1, n2, d1, d2 = _ssim_terms(x, y, p)
    npix = x.size
    # s = (n1*n2)/(d1*d2), mean over pixels; adjoint of each elementwise factor.
    denom = d1 * d2
    s_bar = np.full_like(x, 1.0 / npix)
    n1_bar = s_bar * n2 / denom
    n2_bar = s_bar * n1 / denom
    d1_bar = -s_bar * n1 * n2 / (d1 * denom)
    d2_bar = -s_bar * n1 * n2 / (d2 * denom)
    # n1 = 2 mx my + c1, d1 = mx^2 + my^2 + c1,
    # sxx = S(x^2) - mx^2, sxy = S(xy) - mx my with S the smoothing operator.
    sxx_bar = d2_bar
    sxy_bar = 2 * n2_bar
    mx_bar = 2 * my * n1_bar + 2 * mx * d1_bar - 2 * mx * sxx_bar - my * sxy_bar
    smooth_t = lambda img: wr.T @ img @ wc
    gx = smooth_t(mx_bar) + 2 * x * smooth_t(sxx_bar) + y * smooth_t(sxy_bar)
    val = float(np.mean((n1 * n2) / denom))
    return val, gx


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; identical images give +inf."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak**2 / mse)


def mean_ci99(values) -> tuple[float, float]:
    """Sample mean and 99% normal-approximation half width 2.576*std/sqrt(N)."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError(f"need at least 2 values, got {v.size}")
    return float(np.mean(v)), float(2.576 * np.std(v, ddof=1) / np.sqrt(v.size))
