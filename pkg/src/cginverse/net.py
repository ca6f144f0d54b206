"""Unrolled network mirroring the block-coordinate solver, with learnable
per-layer parameters and hand-written reverse-mode adjoints.

Architecture (K blocks of J descent steps each, K(J+1)+4 layers total):

    Z0   = mrelu(a0, b0, (A/||A||_2)^T y)
    U0   = ridge(Z0, y; lambda_0)
    per block k:   Z_k^j = mrelu(a_kj, b_kj, Z_k^{j-1} + eta_kj .* d_kj)
                   d_kj  = -B_kj grad_z F(U_{k-1}, Z_k^{j-1}; mu_kj)
                   U_k   = ridge(Z_k^J, y; lambda_k)
    output O = U_K .* Z_K^J

B_kj is P_eps(L_kj) for a learnable lower-triangular L restricted to its
diagonal and first sub-diagonal (so the symmetrized matrix is tridiagonal),
the identity (ablation), or the inverse PSD-projected Hessian (inference
only).  The layer graph is static, so differentiation is implemented as
fixed per-layer adjoints rather than a general tape: the ridge solve is
differentiated by a second solve with the same factorization, the
eigendecomposition by the spectral-function rule with pairwise factors
1/(w_j - w_i) clamped in magnitude at 1e-9, and the mReLU / max-guards take
subgradient 0 at kinks and on clamped branches.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import io
from .metrics import ssim_with_grad
from .model import MeasurementModel
from .prior import get_nonlinearity, hf

E = math.e

_EIG_DENOM_CLAMP = 1e-9


def layer_count(k: int, j: int) -> int:
    """Input, init, output layers plus K+1 ridge layers and K*J descent layers."""
    return k * (j + 1) + 4


def param_count(k: int, j: int, n: int) -> int:
    """Learnable scalar count: K(J(3n+2)+1)+3 with tridiagonal-restricted L."""
    return k * (j * (3 * n + 2) + 1) + 3


@dataclass
class NetParams:
    """All learnable parameters, plus the fixed guard constants.

    lam has K+1 entries (lam[0] feeds U0).  Learnable L entries are the
    diagonal and first sub-diagonal only.  eps_guard floors the effective
    lambda at eps_guard and the effective mReLU bounds at z_min + eps_guard;
    eps_psd is the eigenvalue floor inside P_eps.
    """

    lam: np.ndarray          # (K+1,)
    a0: float
    b0: float
    mu: np.ndarray           # (K, J)
    l_diag: np.ndarray       # (K, J, n)
    l_sub: np.ndarray        # (K, J, n-1)
    eta: np.ndarray          # (K, J, n)
    a: np.ndarray            # (K, J)
    b: np.ndarray            # (K, J)
    eps_guard: float = 1e-6
    eps_psd: float = 1e-6

    @property
    def k_blocks(self) -> int:
        return self.mu.shape[0]

    @property
    def j_steps(self) -> int:
        return self.mu.shape[1] if self.mu.ndim == 2 else 0

    @property
    def n(self) -> int:
        return self.eta.shape[2]

    def copy(self) -> "NetParams":
        return NetParams(
            lam=self.lam.copy(), a0=self.a0, b0=self.b0, mu=self.mu.copy(),
            l_diag=self.l_diag.copy(), l_sub=self.l_sub.copy(), eta=self.eta.copy(),
            a=self.a.copy(), b=self.b.copy(),
            eps_guard=self.eps_guard, eps_psd=self.eps_psd,
        )

    def zeros_like(self) -> "NetParams":
        out = self.copy()
        out.lam[:] = 0.0
        out.a0 = 0.0
        out.b0 = 0.0
        out.mu[:] = 0.0
        out.l_diag[:] = 0.0
        out.l_sub[:] = 0.0
        out.eta[:] = 0.0
        out.a[:] = 0.0
        out.b[:] = 0.0
        return out

    def to_vector(self) -> np.ndarray:
        """Flatten in the checkpoint order: lam0, a0, b0, then per (k, j):
        mu, diag(L), subdiag(L), diag(eta), a, b, then lam_k."""
        parts = [np.array([self.lam[0], self.a0, self.b0])]
        for k in range(self.k_blocks):
            for j in range(self.j_steps):
                parts.append(np.array([self.mu[k, j]]))
                parts.append(self.l_diag[k, j])
                parts.append(self.l_sub[k, j])
                parts.append(self.eta[k, j])
                parts.append(np.array([self.a[k, j], self.b[k, j]]))
            parts.append(np.array([self.lam[k + 1]]))
        return np.concatenate(parts)

    def from_vector(self, vec: np.ndarray) -> "NetParams":
        out = self.copy()
        n = self.n
        pos = 0

        def take(count):
            nonlocal pos
            chunk = vec[pos : pos + count]
            pos += count
            return chunk

        out.lam[0], out.a0, out.b0 = take(3)
        for k in range(self.k_blocks):
            for j in range(self.j_steps):
                out.mu[k, j] = take(1)[0]
                out.l_diag[k, j] = take(n)
                out.l_sub[k, j] = take(n - 1)
                out.eta[k, j] = take(n)
                out.a[k, j], out.b[k, j] = take(2)
            out.lam[k + 1] = take(1)[0]
        if pos != vec.size:
            raise ValueError(f"vector length {vec.size} != expected {pos}")
        return out


def default_params(k: int, j: int, n: int, lam_init: float = 0.3,
                   eps_guard: float = 1e-6, eps_psd: float = 1e-6) -> NetParams:
    """Initialization mirroring the solver defaults: a0=1, b0=e^2, eta=I/2,
    mu=2, per-step window (0.8, e^3), L=I, every lambda = lam_init."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if k < 0 or j < 1:
        raise ValueError(f"need k >= 0 and j >= 1, got k={k}, j={j}")
    return NetParams(
        lam=np.full(k + 1, lam_init, dtype=float),
        a0=1.0,
        b0=E**2,
        mu=np.full((k, j), 2.0),
        l_diag=np.ones((k, j, n)),
        l_sub=np.zeros((k, j, max(n - 1, 0))),
        eta=np.full((k, j, n), 0.5),
        a=np.full((k, j), 0.8),
        b=np.full((k, j), E**3),
        eps_guard=eps_guard,
        eps_psd=eps_psd,
    )


@dataclass(frozen=True)
class NetConfig:
    """Structural network configuration (size and initialization)."""

    k: int = 20
    j: int = 1
    lam_init: float = 0.3
    eps_guard: float = 1e-6
    eps_psd: float = 1e-6

    def build(self, n: int) -> NetParams:
        return default_params(self.k, self.j, n, self.lam_init, self.eps_guard, self.eps_psd)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int | None = None
    adam: tuple[float, float, float] = (0.9, 0.999, 1e-8)
    early_stopping: tuple[int, float] = (10, 0.25)  # (patience, validation_fraction)
    loss: str = "ssim"
    b_mode: str = "learned"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in ("ssim", "mae"):
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.b_mode not in ("learned", "identity", "newton"):
            raise ValueError(f"unknown b_mode {self.b_mode!r}")


# ---------------------------------------------------------------------------
# P_eps and its spectral backward


def p_eps(l_mat: np.ndarray, eps: float) -> np.ndarray:
    """Symmetrize, clamp the eigenvalues at eps, recompose."""
    l_mat = np.asarray(l_mat, dtype=float)
    if l_mat.ndim != 2 or l_mat.shape[0] != l_mat.shape[1]:
        raise ValueError(f"L must be square, got {l_mat.shape}")
    s = (l_mat + l_mat.T) / 2.0
    try:
        w, q = np.linalg.eigh(s)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"eigendecomposition failed: {exc}") from exc
    return (q * np.maximum(w, eps)) @ q.T


def _tridiag_eig(diag: np.ndarray, sub: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of the symmetric tridiagonal matrix (diag, sub)."""
    n = diag.size
    band = np.zeros((2, n))
    band[0] = diag
    if n > 1:
        band[1, : n - 1] = sub
    try:
        return scipy.linalg.eig_banded(band, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError(f"tridiagonal eigendecomposition failed: {exc}") from exc


def _spectral_backward(b_bar_u, b_bar_v, w, wc, q, eps):
    """Tridiagonal entries of dLoss/dS for B = Q max(W, eps) Q^T, S symmetric.

    The incoming adjoint of B is the rank-one b_bar_u @ b_bar_v^T; it is
    symmetrized and sandwiched with the Daleckii-Krein factors
    gamma_ij = (g(w_i) - g(w_j)) / (w_i - w_j), gamma_ii = 1{w_i > eps},
    denominators clamped in magnitude at 1e-9 (clamped eigenvalues pass no
    gradient).  Returns (diag part, sub-diagonal part).
    """
    ut = q.T @ b_bar_u
    vt = q.T @ b_bar_v
    dw = w[:, None] - w[None, :]
    dw = np.where(np.abs(dw) < _EIG_DENOM_CLAMP, np.where(dw < 0, -1.0, 1.0) * _EIG_DENOM_CLAMP, dw)
    gamma = (wc[:, None] - wc[None, :]) / dw
    np.fill_diagonal(gamma, (w > eps).astype(float))
    msym = 0.5 * (np.outer(ut, vt) + np.outer(vt, ut))
    t = q @ (gamma * msym)
    s_diag = np.einsum("ib,ib->i", t, q)
    s_sub = np.einsum("ib,ib->i", t[1:], q[:-1])
    return s_diag, s_sub


# ---------------------------------------------------------------------------
# Shared per-parameter layer metrics (eigendecompositions reused across a batch)


def _layer_plan(params: NetParams, b_mode: str):
    if b_mode not in ("learned", "identity", "newton"):
        raise ValueError(f"unknown b_mode {b_mode!r}")
    if b_mode != "learned":
        return None
    plan = []
    for k in range(params.k_blocks):
        row = []
        for j in range(params.j_steps):
            # Symmetrizing lower-triangular L halves its sub-diagonal.
            w, q = _tridiag_eig(params.l_diag[k, j], params.l_sub[k, j] / 2.0)
            wc = np.maximum(w, params.eps_psd)
            row.append((w, wc, q))
        plan.append(row)
    return plan


# ---------------------------------------------------------------------------
# Forward pass


def _ridge_solve(z, y, model, lam):
    """Ridge update with saved factorization/workspace for the adjoint pass.

    Picks the m x m or the (Woodbury-equivalent) n x n SPD system by flop
    count; both workspaces expose u plus what the adjoint needs.
    """
    a = model.a
    m, n = a.shape
    if 2.0 * m * m * n + m**3 / 3.0 < n**3 / 3.0 + 2.0 * n * n:
        az = a * z[None, :]
        mat = az @ az.T
        mat[np.diag_indices_from(mat)] += lam
        ch = scipy.linalg.cho_factor(mat, check_finite=False)
        w = scipy.linalg.cho_solve(ch, y, check_finite=False)
        g = a.T @ w
        u = z * g
        return u, ("m", ch, w, g, z, u)
    gram = model.gram
    mat = (z[:, None] * gram) * z[None, :]
    mat[np.diag_indices_from(mat)] += lam
    ch = scipy.linalg.cho_factor(mat, check_finite=False)
    qy = a.T @ y
    u = scipy.linalg.cho_solve(ch, z * qy, check_finite=False)
    return u, ("n", ch, qy, z, u)


def _ridge_adjoint(ws, u_bar, model):
    """(z_bar, lam_bar) via one more solve with the saved factorization."""
    a = model.a
    if ws[0] == "m":
        _, ch, w, g, z, u = ws
        t = scipy.linalg.cho_solve(ch, a @ (z * u_bar), check_finite=False)
        p = a.T @ t
        return u_bar * g - 2.0 * u * p, -float(t @ w)
    _, ch, qy, z, u = ws
    gram = model.gram
    t = scipy.linalg.cho_solve(ch, u_bar, check_finite=False)
    z_bar = t * qy - t * (gram @ (z * u)) - u * (gram @ (z * t))
    return z_bar, -float(t @ u)


def _grad_f_z(u, z, y, model, mu, spec):
    """grad_z F and the pieces its adjoint reuses: q = A^T(y - A(u .* z)), s = f'f."""
    q = model.a.T @ (y - model.a @ (u * z))
    s = spec.d1(z) * spec.eval(z)
    return -2.0 * u * q + 2.0 * mu * s, q, s


def _check_layer_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise RuntimeError(f"non-finite activations in layer {name}")


def _forward_tape(y, params, model, b_mode, spec, plan):
    """Run the network, recording per-layer workspaces for the adjoint pass."""
    y = np.asarray(y, dtype=float)
    eg = params.eps_guard
    z_floor = spec.z_min + eg
    tape = {"y": y}

    a0e = max(params.a0, z_floor)
    b0e = max(params.b0, z_floor)
    x0 = (model.a.T @ y) / model.spectral_norm
    z = mrelu_net(a0e, b0e, x0)
    _check_layer_finite("Z0", z)
    tape["z0"] = (x0, a0e, b0e, z)

    lam0e = max(params.lam[0], eg)
    u, ws = _ridge_solve(z, y, model, lam0e)
    _check_layer_finite("U0", u)
    tape["u0"] = (ws, u)

    blocks = []
    for k in range(params.k_blocks):
        steps = []
        for j in range(params.j_steps):
            mu = params.mu[k, j]
            r, q, s = _grad_f_z(u, z, y, model, mu, spec)
            if b_mode == "learned":
                w_eig, wc, q_eig = plan[k][j]
                d = -(q_eig @ (wc * (q_eig.T @ r)))
            elif b_mode == "identity":
                d = -r
            else:  # newton: inverse of the PSD-projected Hessian (inference only)
                h = 2.0 * np.outer(u, u) * model.gram
                h[np.diag_indices_from(h)] += 2.0 * mu * hf(spec, z)
                w_eig, q_eig = np.linalg.eigh(h)
                wc = np.maximum(w_eig, params.eps_psd)
                d = -(q_eig @ ((q_eig.T @ r) / wc))
            x = z + params.eta[k, j] * d
            ake = max(params.a[k, j], z_floor)
            bke = max(params.b[k, j], z_floor)
            z_new = mrelu_net(ake, bke, x)
            _check_layer_finite(f"Z_{k + 1}^{j + 1}", z_new)
            steps.append({"z_in": z, "u_in": u, "r": r, "q": q, "s": s,
                          "d": d, "x": x, "ake": ake, "bke": bke, "z_out": z_new})
            z = z_new
        lamke = max(params.lam[k + 1], eg)
        u_new, ws = _ridge_solve(z, y, model, lamke)
        _check_layer_finite(f"U_{k + 1}", u_new)
        blocks.append({"steps": steps, "ridge": (ws, u_new)})
        u = u_new
    tape["blocks"] = blocks
    out = u * z
    _check_layer_finite("O", out)
    tape["out"] = (u, z, out)
    return out, tape


def mrelu_net(a: float, b: float, x: np.ndarray) -> np.ndarray:
    return a + np.maximum(x - a, 0.0) - np.maximum(x - b, 0.0)


def forward(
    y: np.ndarray,
    params: NetParams,
    model: MeasurementModel,
    b_mode: str = "learned",
    nonlinearity: str = "ln",
) -> np.ndarray:
    """Network output: the estimated coefficient vector for measurements y."""
    spec = get_nonlinearity(nonlinearity)
    plan = _layer_plan(params, b_mode)
    c_hat, _ = _forward_tape(y, params, model, b_mode, spec, plan)
    return c_hat


def forward_layers(
    y: np.ndarray,
    params: NetParams,
    model: MeasurementModel,
    b_mode: str = "learned",
    nonlinearity: str = "ln",
):
    """Per-layer states for parity checks: (z_list, u_list, output).

    z_list[0] is Z0 followed by every descent-step output; u_list[0] is U0
    followed by each block's ridge output.
    """
    spec = get_nonlinearity(nonlinearity)
    plan = _layer_plan(params, b_mode)
    out, tape = _forward_tape(y, params, model, b_mode, spec, plan)
    z_list = [tape["z0"][3]]
    u_list = [tape["u0"][1]]
    for block in tape["blocks"]:
        for step in block["steps"]:
            z_list.append(step["z_out"])
        u_list.append(block["ridge"][1])
    return z_list, u_list, out


# ---------------------------------------------------------------------------
# Loss


def loss(c_hat: np.ndarray, c_true: np.ndarray, phi: np.ndarray, loss_kind: str = "ssim") -> float:
    """1 - SSIM of the synthesized images, or their mean absolute error."""
    val, _ = _loss_with_grad(np.asarray(c_hat, float), np.asarray(c_true, float), phi, loss_kind)
    return val


def _loss_with_grad(c_hat, c_true, phi, loss_kind):
    x_hat = phi @ c_hat
    x_true = phi @ c_true
    n = x_hat.size
    side = int(round(math.sqrt(n)))
    if loss_kind == "ssim":
        if side * side != n:
            raise ValueError(f"ssim loss needs square images, got n={n}")
        val, gimg = ssim_with_grad(x_hat.reshape(side, side), x_true.reshape(side, side))
        return 1.0 - val, phi.T @ (-gimg.ravel())
    if loss_kind == "mae":
        diff = x_hat - x_true
        return float(np.mean(np.abs(diff))), phi.T @ (np.sign(diff) / n)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


# ---------------------------------------------------------------------------
# Backward pass


def _backward(tape, params, model, b_mode, spec, plan, c_bar):
    """Accumulate dLoss/dTheta for one sample given dLoss/d(output)."""
    g = params.zeros_like()
    eg = params.eps_guard
    z_floor = spec.z_min + eg
    u_k, z_k, _ = tape["out"]
    u_bar = c_bar * z_k
    z_bar = c_bar * u_k

    for k in range(params.k_blocks - 1, -1, -1):
        block = tape["blocks"][k]
        ws, _ = block["ridge"]
        zb, lam_bar = _ridge_adjoint(ws, u_bar, model)
        z_bar = z_bar + zb
        if params.lam[k + 1] > eg:
            g.lam[k + 1] += lam_bar
        u_bar = np.zeros(params.n)
        for j in range(params.j_steps - 1, -1, -1):
            st = block["steps"][j]
            x, d, r = st["x"], st["d"], st["r"]
            pass_mask = (x > st["ake"]).astype(float) - (x > st["bke"]).astype(float)
            x_bar = z_bar * pass_mask
            if params.a[k, j] > z_floor:
                g.a[k, j] += float(np.sum(z_bar * (1.0 - (x > st["ake"]))))
            if params.b[k, j] > z_floor:
                g.b[k, j] += float(np.sum(z_bar * (x > st["bke"])))
            g.eta[k, j] += x_bar * d
            d_bar = params.eta[k, j] * x_bar
            if b_mode == "learned":
                w_eig, wc, q_eig = plan[k][j]
                r_bar = -(q_eig @ (wc * (q_eig.T @ d_bar)))
                s_diag, s_sub = _spectral_backward(-d_bar, r, w_eig, wc, q_eig, params.eps_psd)
                g.l_diag[k, j] += s_diag
                g.l_sub[k, j] += s_sub
            else:  # identity
                r_bar = -d_bar
            u_in, z_in, q, s = st["u_in"], st["z_in"], st["q"], st["s"]
            mu = params.mu[k, j]
            g.mu[k, j] += 2.0 * float(r_bar @ s)
            phi_vec = model.a.T @ (model.a @ (u_in * r_bar))
            u_bar = u_bar + (-2.0 * r_bar * q + 2.0 * z_in * phi_vec)
            z_bar = x_bar + 2.0 * u_in * phi_vec + 2.0 * mu * hf(spec, z_in) * r_bar

    ws, _ = tape["u0"]
    zb, lam_bar = _ridge_adjoint(ws, u_bar, model)
    z_bar = z_bar + zb
    if params.lam[0] > eg:
        g.lam[0] += lam_bar

    x0, a0e, b0e, _ = tape["z0"]
    if params.a0 > z_floor:
        g.a0 += float(np.sum(z_bar * (1.0 - (x0 > a0e))))
    if params.b0 > z_floor:
        g.b0 += float(np.sum(z_bar * (x0 > b0e)))
    return g


def grad_params(
    batch,
    params: NetParams,
    model: MeasurementModel,
    cfg: TrainConfig,
    nonlinearity: str = "ln",
) -> tuple[NetParams, float]:
    """Mean loss over the batch and its exact gradient with respect to Theta.

    batch is a sequence of (y, c_true) pairs or Sample objects.  The newton
    ablation is inference-only and rejected here.
    """
    pairs = _as_pairs(batch)
    if not pairs:
        raise ValueError("batch must be nonempty")
    if cfg.b_mode == "newton":
        raise ValueError("b_mode='newton' is inference-only; gradients are not defined for it")
    spec = get_nonlinearity(nonlinearity)
    plan = _layer_plan(params, cfg.b_mode)
    total = params.zeros_like()
    total_loss = 0.0
    for y, c_true in pairs:
        c_hat, tape = _forward_tape(y, params, model, cfg.b_mode, spec, plan)
        val, c_bar = _loss_with_grad(c_hat, np.asarray(c_true, float), model.phi, cfg.loss)
        g = _backward(tape, params, model, cfg.b_mode, spec, plan, c_bar)
        _accumulate(total, g, 1.0 / len(pairs))
        total_loss += val / len(pairs)
    _check_grad_finite(total)
    return total, total_loss


def _as_pairs(batch):
    pairs = []
    for item in batch:
        if hasattr(item, "y") and hasattr(item, "c"):
            pairs.append((item.y, item.c))
        else:
            pairs.append((item[0], item[1]))
    return pairs


def _accumulate(total: NetParams, g: NetParams, weight: float) -> None:
    total.lam += weight * g.lam
    total.a0 += weight * g.a0
    total.b0 += weight * g.b0
    total.mu += weight * g.mu
    total.l_diag += weight * g.l_diag
    total.l_sub += weight * g.l_sub
    total.eta += weight * g.eta
    total.a += weight * g.a
    total.b += weight * g.b


def _check_grad_finite(g: NetParams) -> None:
    for name in ("lam", "mu", "l_diag", "l_sub", "eta", "a", "b"):
        arr = np.asarray(getattr(g, name))
        if not np.all(np.isfinite(arr)):
            idx = np.unravel_index(int(np.argmax(~np.isfinite(arr))), arr.shape)
            raise RuntimeError(f"non-finite gradient for parameter {name}[{','.join(map(str, idx))}]")
    if not (math.isfinite(g.a0) and math.isfinite(g.b0)):
        raise RuntimeError("non-finite gradient for parameter a0/b0")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, params: NetParams) -> "AdamState":
        size = params.to_vector().size
        return cls(m=np.zeros(size), v=np.zeros(size))


def adam_step(
    params: NetParams,
    grads: NetParams,
    state: AdamState,
    t: int,
    train_cfg: TrainConfig,
) -> tuple[NetParams, AdamState]:
    """One bias-corrected Adam update on the flattened parameter vector."""
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    beta1, beta2, eps = train_cfg.adam
    theta = params.to_vector()
    g = grads.to_vector()
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    theta = theta - train_cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return params.from_vector(theta), AdamState(m=m, v=v)


# ---------------------------------------------------------------------------
# Training


def evaluate_loss(samples, params, model, cfg: TrainConfig, nonlinearity: str = "ln") -> float:
    pairs = _as_pairs(samples)
    spec = get_nonlinearity(nonlinearity)
    plan = _layer_plan(params, cfg.b_mode)
    total = 0.0
    for y, c_true in pairs:
        c_hat, _ = _forward_tape(y, params, model, cfg.b_mode, spec, plan)
        val, _ = _loss_with_grad(c_hat, np.asarray(c_true, float), model.phi, cfg.loss)
        total += val / len(pairs)
    return total


def train(dataset, model: MeasurementModel, net_cfg: NetConfig, train_cfg: TrainConfig):
    """Adam training with a validation split and best-epoch early stopping.

    Returns (best NetParams, history) where history rows are
    (epoch, train_loss, val_loss): train_loss is the mean batch loss at the
    parameters entering the epoch, val_loss the validation loss after the
    epoch's updates.  The kept parameters are those of the best validation
    epoch.  With validation_fraction = 0 the training set doubles as the
    validation set.
    """
    train_cfg.validate()
    pairs = _as_pairs(dataset.samples if hasattr(dataset, "samples") else dataset)
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 samples to train, got {len(pairs)}")
    patience, val_fraction = train_cfg.early_stopping
    rng = np.random.default_rng(train_cfg.seed)
    perm = rng.permutation(len(pairs))
    n_val = 0 if val_fraction <= 0 else min(len(pairs) - 1, max(2, round(val_fraction * len(pairs))))
    val_pairs = [pairs[i] for i in perm[:n_val]]
    train_pairs = [pairs[i] for i in perm[n_val:]]
    if not train_pairs:
        raise ValueError("empty training split")
    if not val_pairs:
        val_pairs = train_pairs

    params = net_cfg.build(model.n)
    state = AdamState.zeros(params)
    batch_size = train_cfg.batch_size or (len(train_pairs) if len(train_pairs) <= 32 else 32)
    history = []
    best_val = math.inf
    best_params = params.copy()
    best_epoch = 0
    t = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(train_pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            # Shuffling decides batch membership; reduction runs in index
            # order so results do not depend on the iteration order.
            batch = [train_pairs[i] for i in sorted(order[start : start + batch_size])]
            grads, batch_loss = grad_params(batch, params, model, train_cfg)
            t += 1
            params, state = adam_step(params, grads, state, t, train_cfg)
            epoch_loss += batch_loss * len(batch) / len(train_pairs)
        val_loss = evaluate_loss(val_pairs, params, model, train_cfg)
        history.append((epoch, epoch_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            best_epoch = epoch
        if epoch - best_epoch >= patience:
            break
    return best_params, history


def save_history_csv(path: str, history) -> None:
    lines = ["epoch,train_loss,val_loss"]
    for epoch, tr, vl in history:
        lines.append(f"{epoch},{'%.17g' % tr},{'%.17g' % vl}")
    io.atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(params: NetParams, path: str) -> None:
    """Fixed-order CSV: header "cgnet-v1,K,J,n"; a guards row (eps_guard,
    eps_psd); then lam0, a0, b0; per (k, j): mu, diag(L), subdiag(L),
    diag(eta), a, b; then lam_k after each block."""
    k, j, n = params.k_blocks, params.j_steps, params.n
    lines = [f"cgnet-v1,{k},{j},{n}"]
    lines.append(",".join("%.17g" % v for v in (params.eps_guard, params.eps_psd)))
    lines.append("%.17g" % params.lam[0])
    lines.append("%.17g" % params.a0)
    lines.append("%.17g" % params.b0)
    for kk in range(k):
        for jj in range(j):
            lines.append("%.17g" % params.mu[kk, jj])
            lines.append(",".join("%.17g" % v for v in params.l_diag[kk, jj]))
            lines.append(",".join("%.17g" % v for v in params.l_sub[kk, jj]))
            lines.append(",".join("%.17g" % v for v in params.eta[kk, jj]))
            lines.append("%.17g" % params.a[kk, jj])
            lines.append("%.17g" % params.b[kk, jj])
        lines.append("%.17g" % params.lam[kk + 1])
    io.atomic_write_text(path, "\n".join(lines) + "\n")


def load_checkpoint(path: str, expect_n: int | None = None) -> NetParams:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split(",")
    if len(head) != 4 or head[0] != "cgnet-v1":
        raise ValueError(f"{path}: bad header at line 1: {lines[0]!r}")
    k, j, n = (int(v) for v in head[1:])
    if expect_n is not None and n != expect_n:
        raise ValueError(f"{path}: checkpoint n={n} does not match expected n={expect_n}")
    expected_lines = 5 + k * (6 * j + 1)
    if len(lines) != expected_lines:
        raise ValueError(f"{path}: expected {expected_lines} lines for (K,J,n)=({k},{j},{n}), got {len(lines)}")

    pos = 1

    def row(count, what):
        nonlocal pos
        vals = np.array([float(v) for v in lines[pos].split(",")] if lines[pos] else [], dtype=float)
        if vals.size != count:
            raise ValueError(f"{path}: line {pos + 1} ({what}): expected {count} values, got {vals.size}")
        pos += 1
        return vals

    eps_guard, eps_psd = row(2, "guards")
    params = default_params(k, j, n, eps_guard=float(eps_guard), eps_psd=float(eps_psd))
    params.lam[0] = row(1, "lam0")[0]
    params.a0 = row(1, "a0")[0]
    params.b0 = row(1, "b0")[0]
    for kk in range(k):
        for jj in range(j):
            params.mu[kk, jj] = row(1, f"mu[{kk},{jj}]")[0]
            params.l_diag[kk, jj] = row(n, f"l_diag[{kk},{jj}]")
            params.l_sub[kk, jj] = row(n - 1, f"l_sub[{kk},{jj}]")
            params.eta[kk, jj] = row(n, f"eta[{kk},{jj}]")
            params.a[kk, jj] = row(1, f"a[{kk},{jj}]")[0]
            params.b[kk, jj] = row(1, f"b[{kk},{jj}]")[0]
        params.lam[kk + 1] = row(1, f"lam[{kk + 1}]")[0]
    return params
