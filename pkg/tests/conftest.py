"""Shared fixtures.  BLAS pools are capped at one thread: the suite's linear
algebra is dominated by many small-to-medium factorizations and threaded
BLAS loses badly under a container CPU quota."""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

try:
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=1)
except ImportError:
    pass

from cginverse import model as model_mod


@pytest.fixture(scope="session")
def tiny_model():
    """8x8 radon/wavelet instance: m=52, n=64."""
    psi = model_mod.build_radon_matrix(8, 4)
    phi = model_mod.build_wavelet_dictionary(8, 2)
    return model_mod.make_model(psi, phi, 8, "tiny radon/wavelet")


@pytest.fixture(scope="session")
def scalar_model():
    return model_mod.make_model(np.eye(1), np.eye(1), 0, "scalar")


@pytest.fixture(scope="session")
def radon32_model():
    """The table-scale instance: 32x32, 15-angle radon, 2-level wavelet."""
    psi = model_mod.build_radon_matrix(32, 15)
    phi = model_mod.build_wavelet_dictionary(32, 2)
    mdl = model_mod.make_model(psi, phi, 32, "radon-15/wavelet")
    mdl.gram  # warm the cache once for the whole session
    return mdl
