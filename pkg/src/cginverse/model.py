"""Forward models: sensing operators, dictionaries, and measurement synthesis.

Everything is an explicit dense matrix, so adjoints are exact transposes and
operators persist as plain CSV.  Images are vectorized row-major; all
operators here agree on that ordering.
"""

import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.linalg

from . import io


@dataclass
class MeasurementModel:
    """Problem instance: sensing matrix psi, dictionary phi, cached a = psi @ phi."""

    psi: np.ndarray
    phi: np.ndarray
    a: np.ndarray
    n_side: int
    description: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def m(self) -> int:
        return self.psi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    def validate(self) -> None:
        m, n = self.psi.shape
        if self.phi.shape != (n, n):
            raise ValueError(f"phi must be {n}x{n}, got {self.phi.shape}")
        if m < 1 or n < 1:
            raise ValueError("matrix dimensions must be >= 1")
        if m > n:
            raise ValueError(f"compressive instance requires m <= n, got m={m}, n={n}")
        prod = self.psi @ self.phi
        scale = max(np.max(np.abs(prod)), 1e-300)
        if np.max(np.abs(prod - self.a)) > 1e-12 * scale:
            raise ValueError("cached product a does not match psi @ phi")
        if self.n_side and self.n_side**2 != n:
            raise ValueError(f"n_side={self.n_side} inconsistent with n={n}")

    @property
    def gram(self) -> np.ndarray:
        """A^T A, cached (shared read-only across solver iterations)."""
        if "gram" not in self._cache:
            self._cache["gram"] = self.a.T @ self.a
        return self._cache["gram"]

    @property
    def spectral_norm(self) -> float:
        """||A||_2 by power iteration (1e-6 relative, capped at 1000 iterations)."""
        if "snorm" not in self._cache:
            rng = np.random.default_rng(12345)
            v = rng.standard_normal(self.n)
            v /= np.linalg.norm(v)
            g = self.gram
            prev = 0.0
            for _ in range(1000):
                w = g @ v
                nrm = np.linalg.norm(w)
                if nrm == 0.0:
                    break
                v = w / nrm
                if abs(nrm - prev) <= 1e-6 * max(nrm, 1e-300):
                    prev = nrm
                    break
                prev = nrm
            self._cache["snorm"] = math.sqrt(prev)
        return self._cache["snorm"]

    def coefficients_from_image(self, image: np.ndarray) -> np.ndarray:
        """c = phi^{-1} image via a cached LU factorization of phi."""
        if "phi_lu" not in self._cache:
            self._cache["phi_lu"] = scipy.linalg.lu_factor(self.phi)
        return scipy.linalg.lu_solve(self._cache["phi_lu"], np.asarray(image, dtype=float))

    def image_from_coefficients(self, c: np.ndarray) -> np.ndarray:
        return self.phi @ np.asarray(c, dtype=float)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.psi.shape, self.phi.shape, self.n_side)).encode())
        h.update(np.ascontiguousarray(self.psi).tobytes())
        h.update(np.ascontiguousarray(self.phi).tobytes())
        return h.hexdigest()[:16]


def make_model(psi: np.ndarray, phi: np.ndarray, n_side: int, description: str = "") -> MeasurementModel:
    psi = np.asarray(psi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    model = MeasurementModel(psi=psi, phi=phi, a=psi @ phi, n_side=n_side, description=description)
    model.validate()
    return model


@dataclass(frozen=True)
class Sample:
    """One measurement/coefficient pair; y = A c + noise at the recorded SNR."""

    y: np.ndarray
    c: np.ndarray
    snr_db: float
    seed: int


# ---------------------------------------------------------------------------
# Sensing operators


def radon_detector_count(n_side: int) -> int:
    """ceil(sqrt(2) * n_side), bumped to odd so one bin sits on the axis."""
    d = math.ceil(math.sqrt(2.0) * n_side)
    return d + 1 if d % 2 == 0 else d


def build_radon_matrix(n_side: int, n_angles: int) -> np.ndarray:
    """Explicit parallel-beam projector at n_angles uniformly spaced angles.

    Angles are k*180/n_angles degrees.  Detector spacing equals pixel spacing
    and each pixel's mass is split linearly between the two detector bins
    bracketing the projection of its center, so every column of an angle
    block sums to exactly 1: projections partition total image mass per
    angle.  Rows are angle-major (row = angle * n_det + detector).
    """
    if n_side < 2:
        raise ValueError(f"n_side must be >= 2, got {n_side}")
    if n_angles < 1:
        raise ValueError(f"n_angles must be >= 1, got {n_angles}")
    n_det = radon_detector_count(n_side)
    n = n_side * n_side
    half = (n_det - 1) / 2.0
    idx = np.arange(n)
    px = idx % n_side - (n_side - 1) / 2.0
    py = (n_side - 1) / 2.0 - idx // n_side
    a = np.zeros((n_angles * n_det, n))
    for k in range(n_angles):
        theta = k * math.pi / n_angles
        s = px * math.cos(theta) + py * math.sin(theta)
        pos = s + half
        i0 = np.floor(pos).astype(int)
        frac = pos - i0
        base = k * n_det
        lo_ok = (i0 >= 0) & (i0 < n_det)
        hi_ok = (i0 + 1 >= 0) & (i0 + 1 < n_det)
        np.add.at(a, (base + np.clip(i0, 0, n_det - 1), idx), np.where(lo_ok, 1.0 - frac, 0.0))
        np.add.at(a, (base + np.clip(i0 + 1, 0, n_det - 1), idx), np.where(hi_ok, frac, 0.0))
    return a


def build_gaussian_matrix(m: int, n: int, seed: int) -> np.ndarray:
    """Gaussian sensing matrix, entries iid N(0, 1/m); deterministic per seed."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if m > n:
        raise ValueError(f"need m <= n, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((m, n)) / math.sqrt(m)


# ---------------------------------------------------------------------------
# Dictionaries

# CDF 9/7 lifting constants (JPEG2000 irreversible path).
_LIFT_A = -1.586134342059924
_LIFT_B = -0.052980118572961
_LIFT_G = 0.882911075530934
_LIFT_D = 0.443506852043971
_LIFT_Z = 1.230174104914001


def _lift_fwd(x: np.ndarray) -> np.ndarray:
    """One periodic analysis level along the last axis; [approx | detail] packing."""
    s = np.ascontiguousarray(x[..., 0::2])
    d = np.ascontiguousarray(x[..., 1::2])
    d += _LIFT_A * (s + np.roll(s, -1, axis=-1))
    s += _LIFT_B * (np.roll(d, 1, axis=-1) + d)
    d += _LIFT_G * (s + np.roll(s, -1, axis=-1))
    s += _LIFT_D * (np.roll(d, 1, axis=-1) + d)
    return np.concatenate([s * _LIFT_Z, d / _LIFT_Z], axis=-1)


def _lift_inv(x: np.ndarray) -> np.ndarray:
    """Exact reversal of _lift_fwd."""
    half = x.shape[-1] // 2
    s = x[..., :half] / _LIFT_Z
    d = x[..., half:] * _LIFT_Z
    s = s - _LIFT_D * (np.roll(d, 1, axis=-1) + d)
    d = d - _LIFT_G * (s + np.roll(s, -1, axis=-1))
    s = s - _LIFT_B * (np.roll(d, 1, axis=-1) + d)
    d = d - _LIFT_A * (s + np.roll(s, -1, axis=-1))
    out = np.empty_like(x)
    out[..., 0::2] = s
    out[..., 1::2] = d
    return out


def _dwt2_batch(imgs: np.ndarray, levels: int, forward: bool) -> np.ndarray:
    """Multi-level separable 2-D transform of an image stack (batch, N, N)."""
    out = np.array(imgs, dtype=float, copy=True)
    n_side = out.shape[-1]
    sizes = [n_side >> lev for lev in range(levels)]
    order = sizes if forward else reversed(sizes)
    step = _lift_fwd if forward else _lift_inv
    for size in order:
        block = out[:, :size, :size]
        block = step(block)
        block = step(np.swapaxes(block, 1, 2))
        out[:, :size, :size] = np.swapaxes(block, 1, 2)
    return out


def default_wavelet_levels(n_side: int) -> int:
    return 2 if n_side <= 64 else 3


def build_wavelet_dictionary(n_side: int, levels: int) -> np.ndarray:
    """n x n synthesis matrix of the periodic separable CDF 9/7 wavelet.

    Normalized so the full analysis chain has unit DC gain (the sqrt(2)
    per-level filter convention divided by 2^levels): coefficients live on
    the image intensity scale, which keeps the solver's clamp windows and
    regularization weights meaningful for [0, 1] images.
    """
    _check_wavelet_size(n_side, levels)
    n = n_side * n_side
    basis = np.eye(n).reshape(n, n_side, n_side)
    phi = _dwt2_batch(basis, levels, forward=False).reshape(n, n).T
    return phi * float(2**levels)


def build_wavelet_analysis(n_side: int, levels: int) -> np.ndarray:
    """The matching analysis matrix; synthesis @ analysis = I to machine precision."""
    _check_wavelet_size(n_side, levels)
    n = n_side * n_side
    basis = np.eye(n).reshape(n, n_side, n_side)
    inv = _dwt2_batch(basis, levels, forward=True).reshape(n, n).T
    return inv / float(2**levels)


def _check_wavelet_size(n_side: int, levels: int) -> None:
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if n_side < 2 or n_side % (1 << levels) != 0:
        raise ValueError(f"n_side={n_side} is not divisible by 2^levels={1 << levels}")


def build_dct_dictionary(n_side: int) -> np.ndarray:
    """Orthonormal 2-D DCT synthesis matrix (phi^T phi = I)."""
    if n_side < 2:
        raise ValueError(f"n_side must be >= 2, got {n_side}")
    c = scipy.fft.dct(np.eye(n_side), axis=0, norm="ortho")
    return np.kron(c.T, c.T)


# ---------------------------------------------------------------------------
# Measurement synthesis


def synthesize_measurement(
    model: MeasurementModel, image: np.ndarray, snr_db: float, seed: int
) -> Sample:
    """Project an image in [0, 1] to coefficients and add white noise at snr_db.

    Noise power is set from the clean measurement of this sample:
    per-component variance ||A c||^2 / (m * 10^(snr_db/10)).  snr_db = +inf
    means zero noise.
    """
    image = np.asarray(image, dtype=float).ravel()
    if image.size != model.n:
        raise ValueError(f"image length {image.size} != n={model.n}")
    if image.min() < -1e-9 or image.max() > 1.0 + 1e-9:
        raise ValueError(
            f"image values must lie in [0, 1]; got range "
            f"[{image.min():.3g}, {image.max():.3g}]"
        )
    c = model.coefficients_from_image(image)
    clean = model.a @ c
    if math.isinf(snr_db):
        y = clean.copy()
    else:
        var = float(clean @ clean) / (model.m * 10.0 ** (snr_db / 10.0))
        rng = np.random.default_rng(seed)
        y = clean + math.sqrt(var) * rng.standard_normal(model.m)
    return Sample(y=y, c=c, snr_db=float(snr_db), seed=int(seed))


# ---------------------------------------------------------------------------
# Persistence


def save_model(dirpath: str, model: MeasurementModel) -> None:
    os.makedirs(dirpath, exist_ok=True)
    io.save_matrix_csv(os.path.join(dirpath, "psi.csv"), model.psi)
    io.save_matrix_csv(os.path.join(dirpath, "phi.csv"), model.phi)
    io.save_keyvalue(
        os.path.join(dirpath, "meta"),
        {
            "n_side": model.n_side,
            "description": model.description,
            "hash": model.content_hash(),
        },
    )


def load_model(dirpath: str) -> MeasurementModel:
    psi = io.load_matrix_csv(os.path.join(dirpath, "psi.csv"))
    phi = io.load_matrix_csv(os.path.join(dirpath, "phi.csv"))
    meta = io.load_keyvalue(os.path.join(dirpath, "meta"))
    model = make_model(psi, phi, int(meta.get("n_side", 0)), meta.get("description", ""))
    recorded = meta.get("hash")
    if recorded and recorded != model.content_hash():
        raise ValueError(f"{dirpath}: model hash mismatch (corrupted matrices?)")
    return model


def save_sample(dirpath: str, sample: Sample, model_hash: str, image: np.ndarray | None = None) -> None:
    os.makedirs(dirpath, exist_ok=True)
    io.save_vector_csv(os.path.join(dirpath, "y.csv"), sample.y)
    io.save_vector_csv(os.path.join(dirpath, "c.csv"), sample.c)
    io.save_keyvalue(
        os.path.join(dirpath, "meta"),
        {"snr_db": sample.snr_db, "seed": sample.seed, "model": model_hash},
    )
    if image is not None:
        io.save_pgm(os.path.join(dirpath, "x.pgm"), image)


def load_sample(dirpath: str) -> tuple[Sample, dict]:
    y = io.load_vector_csv(os.path.join(dirpath, "y.csv"))
    c = io.load_vector_csv(os.path.join(dirpath, "c.csv"))
    meta = io.load_keyvalue(os.path.join(dirpath, "meta"))
    sample = Sample(y=y, c=c, snr_db=float(meta["snr_db"]), seed=int(meta["seed"]))
    return sample, meta


@dataclass
class Dataset:
    """Samples bound to one measurement model (hash-checked on load)."""

    model: MeasurementModel
    samples: list
    sample_dirs: list

    def __len__(self) -> int:
        return len(self.samples)


def load_dataset(root: str) -> Dataset:
    model = load_model(os.path.join(root, "model"))
    want = model.content_hash()
    samples_root = os.path.join(root, "samples")
    if not os.path.isdir(samples_root):
        raise ValueError(f"{root}: no samples/ directory")
    samples, dirs = [], []
    for name in sorted(os.listdir(samples_root)):
        d = os.path.join(samples_root, name)
        if not os.path.isdir(d):
            continue
        sample, meta = load_sample(d)
        if meta.get("model") != want:
            raise ValueError(f"{d}: sample bound to model {meta.get('model')}, dataset model is {want}")
        samples.append(sample)
        dirs.append(d)
    if not samples:
        raise ValueError(f"{root}: dataset contains no samples")
    return Dataset(model=model, samples=samples, sample_dirs=dirs)
