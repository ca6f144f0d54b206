"""Analytic head phantom so the toolkit runs with zero external data."""

import numpy as np

# Modified (high-contrast) Shepp-Logan ellipses:
# (intensity, major axis a, minor axis b, center x, center y, rotation deg)
_ELLIPSES = np.array(
    [
        [1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0],
        [-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0],
        [-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0],
        [-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0],
        [0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0],
        [0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0],
        [0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0],
        [0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0],
        [0.10, 0.0230, 0.0230, 0.00, -0.6060, 0.0],
        [0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0],
    ]
)


def shepp_logan(n_side: int, seed: int | None = None, perturb: float = 0.0) -> np.ndarray:
    """Rasterize the phantom on an n_side x n_side grid with values in [0, 1].

    With perturb > 0 the ellipse geometry and intensities are jittered by
    relative Gaussian noise of that scale (seeded), giving a family of
    related but distinct phantoms.
    """
    if n_side < 2:
        raise ValueError(f"n_side must be >= 2, got {n_side}")
    ell = _ELLIPSES.copy()
    if perturb > 0.0:
        rng = np.random.default_rng(seed)
        jitter = 1.0 + perturb * rng.standard_normal(ell.shape)
        ell[:, :5] *= jitter[:, :5]
        ell[:, 5] += perturb * 30.0 * rng.standard_normal(len(ell))
    coords = np.linspace(-1.0, 1.0, n_side)
    xg, yg = np.meshgrid(coords, -coords)  # row 0 is the top of the image
    img = np.zeros((n_side, n_side))
    for inten, a, b, x0, y0, deg in ell:
        phi = np.deg2rad(deg)
        c, s = np.cos(phi), np.sin(phi)
        xr = (xg - x0) * c + (yg - y0) * s
        yr = -(xg - x0) * s + (yg - y0) * c
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += inten
    return np.clip(img, 0.0, 1.0)
