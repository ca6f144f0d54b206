"""Block-coordinate regularized least squares with a compound-Gaussian prior.

Minimizes F(u, z) = ||y - A(z .* u)||^2 + lam ||u||^2 + mu ||f(z)||^2 by
alternating steepest-descent steps on z (gradient, Newton, or a fixed
quadratic metric B) with closed-form ridge updates of u.  The ridge update
u = A_z^T (A_z A_z^T + lam I)^{-1} y is computed by an SPD solve of the m x m
system; an equivalent n x n form (equal by the Woodbury identity) is used
internally when it is cheaper, and both forms are exposed for cross-checks.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .model import MeasurementModel
from .prior import NonlinearitySpec, get_nonlinearity, hf

E = math.e


@dataclass(frozen=True)
class CglsConfig:
    """Solver hyperparameters.

    descent is one of "gradient", "newton", "quadratic" (the last uses the
    fixed PSD metric b_matrix).  line search is Armijo backtracking with
    parameters (alpha, beta) unless fixed_step is set, in which case each z
    step is z + eta .* d with no search (the unrolled-network parity mode).
    init_mrelu defaults per mode: (1, e) for newton, (1, e^2) otherwise.
    scale_s multiplies y on entry.  normalize_init initializes z from
    (A/||A||_2)^T y instead of A^T y, matching the network's first layer.
    """

    lam: float = 0.3
    mu: float = 2.0
    k_max: int = 1000
    j_max: int = 1
    delta: float = 1e-6
    descent: str = "gradient"
    b_matrix: np.ndarray | None = None
    alpha: float = 0.3
    beta: float = 0.5
    fixed_step: np.ndarray | float | None = None
    init_mrelu: tuple[float, float] | None = None
    per_step_mrelu: tuple[float, float] | None = None
    scale_s: float = 1.0
    nonlinearity: str = "ln"
    normalize_init: bool = False
    psd_eps: float = 1e-8

    def validate(self) -> None:
        if not (0.0 < self.alpha <= 0.5):
            raise ValueError(f"alpha must be in (0, 0.5], got {self.alpha}")
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        for name in ("lam", "mu", "delta", "scale_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k_max < 1 or self.j_max < 1:
            raise ValueError("k_max and j_max must be >= 1")
        if self.descent not in ("gradient", "newton", "quadratic"):
            raise ValueError(f"unknown descent mode {self.descent!r}")
        if self.descent == "quadratic" and self.b_matrix is None:
            raise ValueError("quadratic descent requires b_matrix")

    def init_window(self) -> tuple[float, float]:
        if self.init_mrelu is not None:
            return self.init_mrelu
        return (1.0, E) if self.descent == "newton" else (1.0, E**2)

    def spec(self) -> NonlinearitySpec:
        return get_nonlinearity(self.nonlinearity)


@dataclass
class CglsTrace:
    """Per-iteration diagnostics of one solver run.

    costs[k] is F after outer iteration k (costs[0] is the initialization);
    grad_dual_norms / step_sizes record every inner descent step;
    full_grad_norms[k-1] is ||grad F(u_k, z_k)||_2 over both blocks after the
    u update of iteration k; armijo_decrements holds
    (G_before, G_after, dual_norm_sq) per accepted backtracking step.
    """

    costs: list = field(default_factory=list)
    grad_dual_norms: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    full_grad_norms: list = field(default_factory=list)
    armijo_decrements: list = field(default_factory=list)
    fallback_steps: list = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    stalled: bool = False
    z_iterates: list | None = None
    u_iterates: list | None = None

    def assert_monotone(self, rel_tol: float = 1e-9) -> None:
        c = np.asarray(self.costs)
        slack = rel_tol * np.maximum(np.abs(c[:-1]), 1.0)
        if np.any(c[1:] > c[:-1] + slack):
            k = int(np.argmax(c[1:] - c[:-1]))
            raise AssertionError(f"cost increased at iteration {k + 1}: {c[k]} -> {c[k + 1]}")

    def to_csv(self, path: str) -> None:
        from . import io

        lines = ["iteration,cost,grad_dual_norm,step_size"]
        for k, cost in enumerate(self.costs):
            g = "%.17g" % self.grad_dual_norms[k - 1] if 0 < k <= len(self.grad_dual_norms) else ""
            s = "%.17g" % self.step_sizes[k - 1] if 0 < k <= len(self.step_sizes) else ""
            lines.append(f"{k},{'%.17g' % cost},{g},{s}")
        io.atomic_write_text(path, "\n".join(lines) + "\n")


class CglsResult(NamedTuple):
    c_star: np.ndarray
    u: np.ndarray
    z: np.ndarray
    trace: CglsTrace


# ---------------------------------------------------------------------------
# Cost, gradient, Hessian


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def cost(u: np.ndarray, z: np.ndarray, y: np.ndarray, model: MeasurementModel, cfg: CglsConfig) -> float:
    """F(u, z) = ||y - A(z .* u)||^2 + lam ||u||^2 + mu ||f(z)||^2."""
    spec = cfg.spec()
    spec.check_domain(z)
    r = y - model.a @ (z * u)
    fz = spec.eval(z)
    return float(r @ r + cfg.lam * (u @ u) + cfg.mu * (fz @ fz))


def grad_z(u: np.ndarray, z: np.ndarray, y: np.ndarray, model: MeasurementModel, cfg: CglsConfig) -> np.ndarray:
    """-2 A_u^T (y - A_u z) + 2 mu f'(z) .* f(z), with A_u = A D{u}."""
    spec = cfg.spec()
    spec.check_domain(z)
    e = y - model.a @ (u * z)
    return -2.0 * u * (model.a.T @ e) + 2.0 * cfg.mu * spec.d1(z) * spec.eval(z)


def grad_u(u: np.ndarray, z: np.ndarray, y: np.ndarray, model: MeasurementModel, cfg: CglsConfig) -> np.ndarray:
    """Gradient of F in the u block: -2 A_z^T (y - A_z u) + 2 lam u."""
    e = y - model.a @ (z * u)
    return -2.0 * z * (model.a.T @ e) + 2.0 * cfg.lam * u


def hess_z(u: np.ndarray, z: np.ndarray, y: np.ndarray, model: MeasurementModel, cfg: CglsConfig) -> np.ndarray:
    """2 A_u^T A_u + 2 mu D{h_f(z)} (symmetric n x n)."""
    spec = cfg.spec()
    spec.check_domain(z)
    h = 2.0 * np.outer(u, u) * model.gram
    h[np.diag_indices_from(h)] += 2.0 * cfg.mu * hf(spec, z)
    return h


# ---------------------------------------------------------------------------
# Ridge update of u (both Woodbury forms)


def tikhonov_update(
    z: np.ndarray,
    y: np.ndarray,
    model: MeasurementModel,
    lam: float,
    form: str = "m",
) -> np.ndarray:
    """u = A_z^T (A_z A_z^T + lam I_m)^{-1} y via an SPD solve (no inverse formed).

    form "m" solves the m x m system above; form "n" solves the equivalent
    n x n system (A_z^T A_z + lam I) u = A_z^T y; form "auto" picks the
    cheaper one by flop count.  The two agree by the Woodbury identity.
    """
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam}")
    _check_finite("z", z)
    _check_finite("y", y)
    a = model.a
    m, n = a.shape
    if form == "auto":
        form = "m" if 2.0 * m * m * n + m**3 / 3.0 < n**3 / 3.0 + 2.0 * n * n else "n"
    if form == "m":
        az = a * z[None, :]
        mat = az @ az.T
        mat[np.diag_indices_from(mat)] += lam
        ch = scipy.linalg.cho_factor(mat, check_finite=False)
        w = scipy.linalg.cho_solve(ch, y, check_finite=False)
        return z * (a.T @ w)
    if form == "n":
        mat = (z[:, None] * model.gram) * z[None, :]
        mat[np.diag_indices_from(mat)] += lam
        ch = scipy.linalg.cho_factor(mat, check_finite=False)
        return scipy.linalg.cho_solve(ch, z * (a.T @ y), check_finite=False)
    raise ValueError(f"unknown form {form!r}")


# ---------------------------------------------------------------------------
# Activation, projection, descent direction, line search


def mrelu(a: float, b: float, x: np.ndarray) -> np.ndarray:
    """Clamp-to-interval activation a + ReLU(x - a) - ReLU(x - b)."""
    x = np.asarray(x, dtype=float)
    return a + np.maximum(x - a, 0.0) - np.maximum(x - b, 0.0)


def _psd_eig(h: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    try:
        w, q = scipy.linalg.eigh(h, driver="evd", check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError(f"eigendecomposition failed: {exc}") from exc
    return np.maximum(w, eps), q


def psd_project(h: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Clamp the eigenvalues of a symmetric matrix at eps and recompose."""
    h = np.asarray(h, dtype=float)
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    scale = max(np.max(np.abs(h)), 1.0)
    if np.max(np.abs(h - h.T)) > 1e-9 * scale:
        raise ValueError("matrix is not symmetric within 1e-9")
    w, q = _psd_eig((h + h.T) / 2.0, eps)
    return (q * w) @ q.T


def _direction(g, u, z, y, model, cfg):
    """Descent vector, squared dual norm, and a Newton-fallback flag.

    The squared dual norm is ||g||_2^2 in gradient mode and g^T B g in
    newton/quadratic modes (B the Hessian-inverse metric / fixed metric);
    in every mode <g, d> = -dual_sq.
    """
    if cfg.descent == "gradient":
        return -g, float(g @ g), False
    if cfg.descent == "quadratic":
        bg = cfg.b_matrix @ g
        return -bg, float(g @ bg), False
    h = hess_z(u, z, y, model, cfg)
    try:
        w, q = _psd_eig((h + h.T) / 2.0, cfg.psd_eps)
    except ValueError:
        return -g, float(g @ g), True
    if w.min() <= 0.0 or not np.all(np.isfinite(w)):
        return -g, float(g @ g), True
    hg = q.T @ g
    d = -(q @ (hg / w))
    return d, float(hg @ (hg / w)), False


def backtracking_search(
    u: np.ndarray,
    z: np.ndarray,
    d: np.ndarray,
    y: np.ndarray,
    model: MeasurementModel,
    cfg: CglsConfig,
) -> float:
    """Armijo backtracking step for G(z) = F(u, z) along descent direction d."""
    g = grad_z(u, z, y, model, cfg)
    slope = float(g @ d)
    if not slope < 0:
        raise ValueError(f"d is not a descent direction (<grad, d> = {slope:.3g})")
    eta, _, _, stalled = _armijo(u, z, d, slope, y, model, cfg)
    return 0.0 if stalled else eta


def _armijo(u, z, d, slope, y, model, cfg):
    """Shared line-search core; returns (eta, G(z), G(z + eta d), stalled)."""
    z_min = cfg.spec().z_min
    g0 = cost(u, z, y, model, cfg)
    eta = 1.0
    # Halve until z + eta d is inside the open domain (at most 60 times); the
    # domain is convex, so smaller Armijo candidates stay feasible as well.
    for _ in range(60):
        if np.all(z + eta * d > z_min):
            break
        eta *= 0.5
    else:
        return 0.0, g0, g0, True
    for _ in range(200):
        z_try = z + eta * d
        if np.all(z_try > z_min):
            g_try = cost(u, z_try, y, model, cfg)
            if g_try <= g0 + cfg.alpha * eta * slope:
                return eta, g0, g_try, False
        eta *= cfg.beta
        if eta < 2.0**-60:
            break
    return 0.0, g0, g0, True


def descent_direction(
    u: np.ndarray, z: np.ndarray, y: np.ndarray, model: MeasurementModel, cfg: CglsConfig
) -> np.ndarray:
    g = grad_z(u, z, y, model, cfg)
    d, _, _ = _direction(g, u, z, y, model, cfg)
    return d


# ---------------------------------------------------------------------------
# The full solver


def run_cgls(
    y: np.ndarray,
    model: MeasurementModel,
    cfg: CglsConfig,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    record_iterates: bool = False,
) -> CglsResult:
    """Alternate z descent steps and ridge u updates; returns c* = z_K .* u_K.

    Initialization is z0 = mrelu(a, b, A^T (s y)), u0 = ridge(z0) unless an
    explicit (u0, z0) pair is supplied.  Convergence is declared when the
    squared dual norm of grad_z F at the first inner step of an iteration
    falls below delta, in which case the previous iterates are returned.
    """
    cfg.validate()
    _check_finite("y", y)
    ys = cfg.scale_s * np.asarray(y, dtype=float)
    a_w, b_w = cfg.init_window()

    if init is not None:
        u_prev = np.asarray(init[0], dtype=float).copy()
        z_prev = np.asarray(init[1], dtype=float).copy()
        cfg.spec().check_domain(z_prev)
    else:
        back = model.a.T @ ys
        if cfg.normalize_init:
            back = back / model.spectral_norm
        z_prev = mrelu(a_w, b_w, back)
        u_prev = tikhonov_update(z_prev, ys, model, cfg.lam, form="auto")

    trace = CglsTrace()
    if record_iterates:
        trace.z_iterates = [z_prev.copy()]
        trace.u_iterates = [u_prev.copy()]
    trace.costs.append(cost(u_prev, z_prev, ys, model, cfg))

    fixed = cfg.fixed_step
    if fixed is not None:
        fixed = np.asarray(fixed, dtype=float) * np.ones(model.n)

    for k in range(1, cfg.k_max + 1):
        z = z_prev.copy()
        for j in range(1, cfg.j_max + 1):
            g = grad_z(u_prev, z, ys, model, cfg)
            d, dual_sq, fell_back = _direction(g, u_prev, z, ys, model, cfg)
            if fell_back:
                trace.fallback_steps.append((k, j))
            if fixed is None:
                # Algorithm convergence test: squared dual norm against delta.
                if dual_sq < cfg.delta:
                    if j == 1:
                        trace.converged = True
                        trace.iterations_run = k - 1
                        c_star = z_prev * u_prev
                        return CglsResult(c_star, u_prev, z_prev, trace)
                    break
                eta, g_before, g_after, stalled = _armijo(u_prev, z, d, -dual_sq, ys, model, cfg)
                trace.grad_dual_norms.append(math.sqrt(dual_sq))
                trace.step_sizes.append(eta)
                if stalled:
                    trace.stalled = True
                    break
                trace.armijo_decrements.append((g_before, g_after, dual_sq))
                z = z + eta * d
            else:
                trace.grad_dual_norms.append(math.sqrt(dual_sq))
                trace.step_sizes.append(float(np.mean(fixed)))
                z = z + fixed * d
            if cfg.per_step_mrelu is not None:
                z = mrelu(cfg.per_step_mrelu[0], cfg.per_step_mrelu[1], z)
        u = tikhonov_update(z, ys, model, cfg.lam, form="auto")
        f_val = cost(u, z, ys, model, cfg)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(z)) and math.isfinite(f_val)):
            raise RuntimeError(f"non-finite iterate at iteration {k}")
        trace.costs.append(f_val)
        gz = grad_z(u, z, ys, model, cfg)
        gu = grad_u(u, z, ys, model, cfg)
        trace.full_grad_norms.append(math.sqrt(float(gz @ gz + gu @ gu)))
        u_prev, z_prev = u, z
        trace.iterations_run = k
        if record_iterates:
            trace.z_iterates.append(z.copy())
            trace.u_iterates.append(u.copy())
    return CglsResult(z_prev * u_prev, u_prev, z_prev, trace)


# ---------------------------------------------------------------------------
# Stationarity diagnostics and input scaling


def stationarity_residual(
    z: np.ndarray, y: np.ndarray, model: MeasurementModel, cfg: CglsConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Stationarity map and its ridge dual: a point is stationary iff the map is 0.

    v(z) = A^T (A_z A_z^T + lam I)^{-1} (s y) and the map is
    -2 lam z .* v .* v + 2 mu f'(z) .* f(z).  cfg.scale_s is applied to y so
    the residual is consistent with what run_cgls solved.
    """
    spec = cfg.spec()
    spec.check_domain(z)
    ys = cfg.scale_s * np.asarray(y, dtype=float)
    _check_finite("y", ys)
    _check_finite("z", z)
    a = model.a
    az = a * z[None, :]
    mat = az @ az.T
    mat[np.diag_indices_from(mat)] += cfg.lam
    ch = scipy.linalg.cho_factor(mat, check_finite=False)
    v = a.T @ scipy.linalg.cho_solve(ch, ys, check_finite=False)
    f_map = -2.0 * cfg.lam * z * v * v + 2.0 * cfg.mu * spec.d1(z) * spec.eval(z)
    return f_map, v


def recommend_scale(
    y: np.ndarray,
    model: MeasurementModel,
    cfg: CglsConfig,
    b: float,
    z0: float,
    n_probe: int,
    seed: int,
) -> float:
    """Largest s satisfying both scaling conditions for a minimizer in [z0, b]^n.

    Requires f^2 strictly convex with interior minimum z0 on [z0, b] (the
    caller asserts; the curvature window is checked on a 1e-3 grid).  The
    dual magnitude v_max is estimated by maximizing |v_i(z)| over n_probe
    random z in [z0, b]^n with the unscaled y, and the returned s satisfies
    min{f'(b) f(b) / b, hf_min} / v_max^2 >= (lam/mu) s^2.
    """
    spec = cfg.spec()
    grid = np.arange(z0, b, 1e-3)
    hf_min = float(np.min(hf(spec, grid)))
    if hf_min <= 0:
        raise ValueError(f"window [{z0}, {b}] is not strictly convex for f^2 (hf_min={hf_min:.3g})")
    edge = float(spec.d1(np.array([b]))[0] * spec.eval(np.array([b]))[0] / b)
    bound = min(edge, hf_min)
    rng = np.random.default_rng(seed)
    a = model.a
    v_max = 0.0
    for _ in range(n_probe):
        z = rng.uniform(z0, b, size=model.n)
        az = a * z[None, :]
        mat = az @ az.T
        mat[np.diag_indices_from(mat)] += cfg.lam
        ch = scipy.linalg.cho_factor(mat, check_finite=False)
        v = a.T @ scipy.linalg.cho_solve(ch, np.asarray(y, dtype=float), check_finite=False)
        v_max = max(v_max, float(np.max(np.abs(v))))
    if v_max <= 0:
        raise ValueError("degenerate measurement: v(z) vanished on every probe")
    return math.sqrt(cfg.mu * bound / cfg.lam) / v_max


def config_from_mapping(section: dict) -> CglsConfig:
    """Build a CglsConfig from a [solver] config-file section."""
    kw = {}
    float_keys = {
        "lambda": "lam",
        "mu": "mu",
        "delta": "delta",
        "alpha": "alpha",
        "beta": "beta",
        "scale": "scale_s",
        "psd_eps": "psd_eps",
    }
    int_keys = {"k_max": "k_max", "j_max": "j_max"}
    for key, attr in float_keys.items():
        if key in section:
            kw[attr] = float(section[key])
    for key, attr in int_keys.items():
        if key in section:
            kw[attr] = int(section[key])
    if "descent" in section:
        kw["descent"] = section["descent"].strip()
    if "nonlinearity" in section:
        kw["nonlinearity"] = section["nonlinearity"].strip()
    if "init_mrelu_a" in section or "init_mrelu_b" in section:
        kw["init_mrelu"] = (float(section["init_mrelu_a"]), float(section["init_mrelu_b"]))
    cfg = CglsConfig(**kw)
    cfg.validate()
    return cfg
