"""Compound-Gaussian prior machinery.

The prior models coefficients as c = z .* u with u standard normal and
z = h(x) a positive nonlinear transform of a normal vector.  The solver side
works with f = h^{-1}; this module registers f together with its first two
derivatives and the domain floor z_min (domain is the open interval
(z_min, inf)).
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erfc


@dataclass(frozen=True)
class NonlinearitySpec:
    """A C^2 scalar nonlinearity f with derivatives, vectorized over numpy arrays."""

    name: str
    eval: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray]
    d2: Callable[[np.ndarray], np.ndarray]
    z_min: float = 0.0

    def check_domain(self, z: np.ndarray) -> None:
        z = np.asarray(z)
        bad = np.flatnonzero(~(z > self.z_min))
        if bad.size:
            i = int(bad[0])
            raise ValueError(
                f"nonlinearity {self.name!r}: z[{i}]={z.flat[i]!r} is outside "
                f"the domain ({self.z_min}, inf)"
            )


_REGISTRY: dict[str, NonlinearitySpec] = {}


def _check_derivatives(spec: NonlinearitySpec) -> None:
    """Finite-difference consistency of d1/d2 on a log grid over the domain."""
    z = np.geomspace(spec.z_min + 0.01, 100.0, 200)
    h = 1e-5 * np.maximum(np.abs(z), 1.0)
    fd1 = (spec.eval(z + h) - spec.eval(z - h)) / (2 * h)
    fd2 = (spec.eval(z + h) - 2 * spec.eval(z) + spec.eval(z - h)) / h**2
    scale1 = np.maximum(np.abs(fd1), 1e-8)
    scale2 = np.maximum(np.abs(fd2), 1e-8)
    err1 = np.max(np.abs(fd1 - spec.d1(z)) / scale1)
    err2 = np.max(np.abs(fd2 - spec.d2(z)) / scale2)
    if err1 > 1e-5 or err2 > 1e-4:
        raise ValueError(
            f"nonlinearity {spec.name!r}: derivatives disagree with finite "
            f"differences (rel err d1={err1:.2e}, d2={err2:.2e})"
        )


def _check_coercive(spec: NonlinearitySpec) -> None:
    lo = spec.eval(np.array([spec.z_min + 1e-6]))[0]
    hi = spec.eval(np.array([1e6]))[0]
    if not (abs(lo) >= 1.0 and abs(hi) >= 1.0):
        raise ValueError(
            f"nonlinearity {spec.name!r} does not look coercive: "
            f"f(z_min+1e-6)={lo:.3g}, f(1e6)={hi:.3g}"
        )


def register_nonlinearity(spec: NonlinearitySpec, validate: bool = True) -> NonlinearitySpec:
    """Add a named nonlinearity to the registry (validated at registration)."""
    if validate:
        _check_derivatives(spec)
        _check_coercive(spec)
    _REGISTRY[spec.name] = spec
    return spec


def get_nonlinearity(name: str) -> NonlinearitySpec:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown nonlinearity {name!r}; registered: {sorted(_REGISTRY)}")


def registered_nonlinearities() -> list[str]:
    return sorted(_REGISTRY)


def log_nonlinearity() -> NonlinearitySpec:
    """f(z) = ln z on (0, inf); f' = 1/z, f'' = -1/z^2."""
    return get_nonlinearity("ln")


register_nonlinearity(
    NonlinearitySpec(
        name="ln",
        eval=np.log,
        d1=lambda z: 1.0 / z,
        d2=lambda z: -1.0 / z**2,
        z_min=0.0,
    )
)


def hf(spec: NonlinearitySpec, z: np.ndarray) -> np.ndarray:
    """Curvature term f''(z)*f(z) + f'(z)^2; for f = ln this is (1 - ln z)/z^2."""
    z = np.asarray(z, dtype=float)
    spec.check_domain(z)
    return spec.d2(z) * spec.eval(z) + spec.d1(z) ** 2


def std_normal_cdf(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF via the complementary error function (|err| < 1e-12)."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / np.sqrt(2.0))


def laplace_nonlinearity(lambda_l: float) -> Callable[[np.ndarray], np.ndarray]:
    """Scale map h with h(x) .* u Laplace(lambda_l)-distributed for normal x, u.

    h(x) = sqrt(-2 * lambda_l^2 * ln(1 - Cdf(x))); the CDF is clamped to
    [1e-15, 1 - 1e-15] to guard log(0) overflow in the tails.
    """
    if not lambda_l > 0:
        raise ValueError(f"lambda_l must be positive, got {lambda_l}")

    def h(x: np.ndarray) -> np.ndarray:
        p = np.clip(std_normal_cdf(x), 1e-15, 1.0 - 1e-15)
        return np.sqrt(-2.0 * lambda_l**2 * np.log1p(-p))

    return h


def sqrt_exp_scale(alpha: float) -> Callable[[np.ndarray], np.ndarray]:
    """h(x) = sqrt(exp(x / alpha)), a sampling-only scale map (not a solver input)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return lambda x: np.sqrt(np.exp(np.asarray(x, dtype=float) / alpha))


def sample_cg(n: int, h: Callable[[np.ndarray], np.ndarray], seed: int) -> np.ndarray:
    """Draw one compound-Gaussian vector h(x) .* u with x, u iid standard normal.

    x is drawn before u from the same seeded generator, so samples are
    reproducible bit-for-bit.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    u = rng.standard_normal(n)
    return h(x) * u
