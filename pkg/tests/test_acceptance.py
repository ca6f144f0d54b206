"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with plain `pytest`; `pytest -m "not acceptance"` skips these (they are
the long-running ones).  Criterion 2 is conditional on a user-supplied
image and is skipped when absent.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from cginverse import model as model_mod
from cginverse import net, solver, theory
from cginverse.cli import method_config, reconstruct_samples
from cginverse.io import load_pgm
from cginverse.metrics import mean_ci99, psnr, ssim
from cginverse.model import Dataset, synthesize_measurement
from cginverse.phantoms import shepp_logan
from cginverse.solver import CglsConfig, mrelu, run_cgls, tikhonov_update

E = math.e
WORKERS = min(2, os.cpu_count() or 1)

pytestmark = pytest.mark.acceptance


def _report(num, ok, detail):
    print(f"\nACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


@pytest.fixture(scope="module")
def phantom_dataset(radon32_model):
    """20 perturbed phantoms, 15-angle Radon, 60 dB."""
    samples = [
        synthesize_measurement(
            radon32_model, shepp_logan(32, seed=100 + i, perturb=0.05).ravel(), 60.0, 200 + i
        )
        for i in range(20)
    ]
    return Dataset(model=radon32_model, samples=samples, sample_dirs=[])


def _image_quality(mdl, c_hat, c_true):
    x_hat = np.clip(mdl.image_from_coefficients(c_hat), 0.0, 1.0).reshape(mdl.n_side, mdl.n_side)
    x_true = np.clip(mdl.image_from_coefficients(c_true), 0.0, 1.0).reshape(mdl.n_side, mdl.n_side)
    return ssim(x_hat, x_true), psnr(x_hat, x_true)


def test_criterion_01_table_scale_ordering(phantom_dataset, tmp_path):
    """Mean-SSIM ordering nCG >= gCG >= {ridge(lam->inf), zero-iteration init}."""
    t0 = time.time()
    mdl = phantom_dataset.model
    means = {}
    table = {}
    for method in ("ncgls", "gcgls"):
        cfg = replace(method_config(method, mdl.n_side), k_max=1000)
        # reconstruct_samples returns estimates already divided by scale_s.
        results = reconstruct_samples(phantom_dataset, cfg, workers=WORKERS)
        vals = [
            _image_quality(mdl, c_hat, s.c)
            for (c_hat, _), s in zip(results, phantom_dataset.samples)
        ]
        table[method] = vals
        means[method] = float(np.mean([v[0] for v in vals]))
    init_vals, tik_vals = [], []
    for s in phantom_dataset.samples:
        z0 = mrelu(1.0, E**2, mdl.a.T @ s.y)
        u0 = tikhonov_update(z0, s.y, mdl, 0.3, form="auto")
        init_vals.append(_image_quality(mdl, z0 * u0, s.c))
        u_inf = tikhonov_update(z0, s.y, mdl, 1e8, form="auto")
        tik_vals.append(_image_quality(mdl, z0 * u_inf, s.c))
    means["init"] = float(np.mean([v[0] for v in init_vals]))
    means["tik_inf"] = float(np.mean([v[0] for v in tik_vals]))
    elapsed = time.time() - t0

    # Documented SSIM report (the acceptance artifact).
    lines = ["method,mean_ssim,ci99,mean_psnr"]
    for name, vals in (("ncgls", table["ncgls"]), ("gcgls", table["gcgls"]),
                       ("init", init_vals), ("tik_inf", tik_vals)):
        m, hw = mean_ci99([v[0] for v in vals])
        lines.append(f"{name},{m:.6f},{hw:.6f},{np.mean([v[1] for v in vals]):.3f}")
    report_path = tmp_path / "criterion1_ssim_report.csv"
    report_path.write_text("\n".join(lines) + "\n")
    detail = (
        f"nCG={means['ncgls']:.4f} gCG={means['gcgls']:.4f} init={means['init']:.4f} "
        f"tik_inf={means['tik_inf']:.4f} ({elapsed:.0f}s, report: {report_path})"
    )
    ordering = (
        means["ncgls"] >= means["gcgls"]
        and means["gcgls"] >= means["tik_inf"]
        and means["gcgls"] >= means["init"]
    )
    _report(1, ordering and elapsed <= 600, detail)
    assert elapsed <= 600
    assert means["gcgls"] >= means["tik_inf"]
    assert means["gcgls"] >= means["init"]
    # Known shortfall in this measurement-unit regime: the Newton variant's
    # e^-4 input scaling makes the z-prior term dominate its data term, so
    # its z block converges to the prior root (z = 1) and the method
    # coincides with a uniform ridge, while the unscaled gradient variant
    # keeps data-adaptive z.  Piecewise-constant phantoms reward that
    # adaptivity by a small margin at every dictionary normalization tested,
    # so this ordering does not hold here; it is asserted as stated rather
    # than loosened.
    assert means["ncgls"] >= means["gcgls"], (
        f"expected ordering not reproduced on phantoms: nCG {means['ncgls']:.4f} "
        f"< gCG {means['gcgls']:.4f}"
    )


def test_criterion_02_single_image_conditional(radon32_model):
    """nCG-LS SSIM >= 0.90 on a user-supplied 32x32 Barbara crop."""
    path = os.environ.get("CG_BARBARA_PGM", os.path.join("data", "barbara32.pgm"))
    if not os.path.exists(path):
        print("\nACCEPTANCE 2: SKIP - no 32x32 Barbara crop supplied "
              f"(looked for {path}; set CG_BARBARA_PGM to enable)")
        pytest.skip("Barbara crop not supplied")
    img = load_pgm(path)
    assert img.shape == (32, 32)
    mdl = radon32_model
    sample = synthesize_measurement(mdl, img.ravel(), 60.0, seed=7)
    cfg = replace(method_config("ncgls", 32), k_max=1000)
    res = run_cgls(sample.y, mdl, cfg)
    val, _ = _image_quality(mdl, res.c_star / cfg.scale_s, sample.c)
    ok = _report(2, val >= 0.90, f"nCG-LS SSIM {val:.3f} on {path}")
    assert ok


def test_criterion_03_stationarity():
    t0 = time.time()
    rep = theory.check_lemma1(50, seed=7, out_dir="/tmp/cg-acc")
    elapsed = time.time() - t0
    ok = rep.pass_count == 50 and elapsed <= 120
    _report(3, ok, f"{rep.pass_count}/50 stationary, worst map norm {rep.worst_margin:.2e}, {elapsed:.0f}s")
    assert rep.pass_count == 50
    assert elapsed <= 120


def test_criterion_04_descent_bound():
    t0 = time.time()
    rep = theory.check_prop2(50, seed=11, out_dir="/tmp/cg-acc")
    elapsed = time.time() - t0
    ok = rep.passed and rep.worst_margin > 1e-12 and elapsed <= 120
    _report(4, ok, f"min per-step ratio {rep.worst_margin:.3e} over {rep.notes}, {elapsed:.0f}s")
    assert rep.worst_margin > 1e-12
    assert elapsed <= 120


def test_criterion_05_rate():
    t0 = time.time()
    rep = theory.check_thm1_rate([10, 100, 1000], 10, seed=13, out_dir="/tmp/cg-acc")
    elapsed = time.time() - t0
    ok = rep.pass_count == 10 and elapsed <= 300
    _report(5, ok, f"{rep.pass_count}/10 bounded K*min-grad (worst ratio {rep.worst_margin:.3f}), "
                   f"traces monotone, {elapsed:.0f}s")
    assert rep.pass_count == 10  # includes the monotone-cost prerequisite
    assert elapsed <= 300


def test_criterion_06_linear_local_rate():
    t0 = time.time()
    rep = theory.check_thm2_linear(20, seed=17, out_dir="/tmp/cg-acc")
    elapsed = time.time() - t0
    ok = rep.pass_count >= 18 and rep.inconclusive_count <= 2 and elapsed <= 300
    _report(6, ok, f"{rep.pass_count}/20 linear fits (R^2 worst {rep.worst_margin:.3f}), "
                   f"{rep.inconclusive_count} inconclusive, {elapsed:.0f}s")
    assert rep.pass_count >= 18
    assert rep.inconclusive_count <= 2
    assert rep.pass_count + rep.inconclusive_count == 20
    assert elapsed <= 300


def test_criterion_07_scaling_law():
    t0 = time.time()
    rep = theory.check_prop1_scaling(20, seed=19, out_dir="/tmp/cg-acc")
    elapsed = time.time() - t0
    ok = rep.pass_count == 20 and elapsed <= 180
    _report(7, ok, f"{rep.pass_count}/20 with z* in [1, e] within 1e-6; {rep.notes}; {elapsed:.0f}s")
    assert rep.pass_count == 20
    assert elapsed <= 180


def test_criterion_08_derivative_correctness():
    rng = np.random.default_rng(23)
    worst_g = worst_h = 0.0
    for _ in range(50):
        n = int(rng.integers(8, 17))
        m = int(rng.integers(4, 9))
        a = rng.standard_normal((m, n)) / math.sqrt(m)
        mdl = model_mod.make_model(a, np.eye(n), 0)
        cfg = CglsConfig(lam=float(rng.uniform(0.1, 1.0)), mu=float(rng.uniform(0.5, 3.0)))
        u = rng.standard_normal(n)
        z = 0.4 + rng.random(n)
        y = rng.standard_normal(m)
        g = solver.grad_z(u, z, y, mdl, cfg)
        h = 1e-6
        fd = np.zeros(n)
        for i in range(n):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd[i] = (solver.cost(u, zp, y, mdl, cfg) - solver.cost(u, zm, y, mdl, cfg)) / (2 * h)
        worst_g = max(worst_g, np.linalg.norm(g - fd) / np.linalg.norm(fd))
        hess = solver.hess_z(u, z, y, mdl, cfg)
        fdh = np.zeros((n, n))
        for i in range(n):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fdh[:, i] = (solver.grad_z(u, zp, y, mdl, cfg) - solver.grad_z(u, zm, y, mdl, cfg)) / (2 * h)
        worst_h = max(worst_h, np.linalg.norm(hess - fdh) / np.linalg.norm(fdh))

    # Network parameter gradients on the tiny net (n=16, m=8, K=2, J=1).
    rng2 = np.random.default_rng(3)
    psi = rng2.standard_normal((8, 16)) / math.sqrt(8)
    phi = model_mod.build_dct_dictionary(4)
    tiny = model_mod.make_model(psi, phi, 4)
    batch = [
        synthesize_measurement(tiny, rng2.random(16), 40.0, seed=31),
        synthesize_measurement(tiny, rng2.random(16), 40.0, seed=32),
    ]
    params = net.default_params(2, 1, 16)
    vec = params.to_vector()
    vec = vec * (1 + 0.05 * rng2.standard_normal(vec.size)) + 0.01 * rng2.standard_normal(vec.size)
    params = params.from_vector(vec)
    params.l_sub[:] = 0.2 * rng2.standard_normal(params.l_sub.shape)

    classes = {
        "lam": lambda p: p.lam, "a0": lambda p: np.atleast_1d(p.a0),
        "b0": lambda p: np.atleast_1d(p.b0), "mu": lambda p: p.mu.ravel(),
        "l_diag": lambda p: p.l_diag.ravel(), "l_sub": lambda p: p.l_sub.ravel(),
        "eta": lambda p: p.eta.ravel(), "a": lambda p: p.a.ravel(), "b": lambda p: p.b.ravel(),
    }
    worst_net = 0.0
    for loss_kind in ("ssim", "mae"):
        for b_mode in ("learned", "identity"):
            cfg = net.TrainConfig(loss=loss_kind, b_mode=b_mode)
            grads, _ = net.grad_params(batch, params, tiny, cfg)
            v0 = params.to_vector()
            fd = np.zeros_like(v0)
            step = 1e-5 * np.maximum(np.abs(v0), 1.0)
            for i in range(v0.size):
                vp, vm = v0.copy(), v0.copy()
                vp[i] += step[i]
                vm[i] -= step[i]
                lp = net.evaluate_loss(batch, params.from_vector(vp), tiny, cfg)
                lm = net.evaluate_loss(batch, params.from_vector(vm), tiny, cfg)
                fd[i] = (lp - lm) / (2 * step[i])
            fd_params = params.zeros_like().from_vector(fd)
            for name, get in classes.items():
                got = get(grads)
                want = get(fd_params)
                denom = np.linalg.norm(want)
                if denom == 0.0:
                    assert np.linalg.norm(got) == 0.0, f"{name} should be dead in {b_mode}"
                    continue
                rel = np.linalg.norm(got - want) / denom
                worst_net = max(worst_net, rel)
                assert rel < 1e-4, f"{loss_kind}/{b_mode}/{name}: rel err {rel:.2e}"

    ok = worst_g < 1e-6 and worst_h < 1e-5 and worst_net < 1e-4
    _report(8, ok, f"grad_z fd {worst_g:.2e} (<1e-6), hess_z fd {worst_h:.2e} (<1e-5), "
                   f"net params fd {worst_net:.2e} (<1e-4)")
    assert worst_g < 1e-6
    assert worst_h < 1e-5


def test_criterion_09_forward_parity(radon32_model):
    mdl = radon32_model
    params = net.default_params(20, 1, mdl.n, lam_init=0.3)
    cfg = CglsConfig(
        lam=0.3, mu=2.0, k_max=20, j_max=1, descent="gradient", fixed_step=0.5,
        init_mrelu=(1.0, E**2), per_step_mrelu=(0.8, E**3), normalize_init=True,
        delta=1e-300,
    )
    rng = np.random.default_rng(29)
    worst = 0.0
    for i in range(10):
        img = shepp_logan(32, seed=700 + i, perturb=0.05)
        y = synthesize_measurement(mdl, img.ravel(), 60.0, 800 + i).y
        zs, us, out = net.forward_layers(y, params, mdl)
        res = run_cgls(y, mdl, cfg, record_iterates=True)
        for z_net, z_ref in zip(zs, res.trace.z_iterates):
            worst = max(worst, float(np.max(np.abs(z_net - z_ref))))
        for u_net, u_ref in zip(us, res.trace.u_iterates):
            worst = max(worst, float(np.max(np.abs(u_net - u_ref))))
        worst = max(worst, float(np.max(np.abs(out - res.c_star))))
    ok = _report(9, worst < 1e-10, f"44-layer parity, worst layer deviation {worst:.2e} (<1e-10)")
    assert ok


def test_criterion_10_woodbury_equivalence():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(6, 32))
        m = int(rng.integers(3, n + 1))
        a = rng.standard_normal((m, n))
        mdl = model_mod.make_model(a, np.eye(n), 0)
        z = 0.1 + 3.0 * rng.random(n)
        y = rng.standard_normal(m)
        lam = float(10.0 ** rng.uniform(-3, 1))
        um = solver.tikhonov_update(z, y, mdl, lam, form="m")
        un = solver.tikhonov_update(z, y, mdl, lam, form="n")
        worst = max(worst, float(np.linalg.norm(um - un) / np.linalg.norm(um)))
    ok = _report(10, worst < 1e-8, f"both ridge forms agree, worst rel diff {worst:.2e} (<1e-8)")
    assert ok


def test_criterion_11_training_improvement(radon32_model):
    t0 = time.time()
    mdl = radon32_model
    train_samples = [
        synthesize_measurement(mdl, shepp_logan(32, seed=400 + i, perturb=0.05).ravel(), 60.0, 500 + i)
        for i in range(20)
    ]
    held_out = [
        synthesize_measurement(mdl, shepp_logan(32, seed=900 + i, perturb=0.05).ravel(), 60.0, 950 + i)
        for i in range(6)
    ]
    ncfg = net.NetConfig(k=20, j=1, lam_init=0.3)
    tcfg = net.TrainConfig(epochs=30, learning_rate=1e-3, early_stopping=(30, 0.25), seed=0)

    def mean_heldout_ssim(params):
        vals = []
        for s in held_out:
            c_hat = net.forward(s.y, params, mdl)
            vals.append(_image_quality(mdl, c_hat, s.c)[0])
        return float(np.mean(vals))

    before = mean_heldout_ssim(ncfg.build(mdl.n))
    params, history = net.train(train_samples, mdl, ncfg, tcfg)
    after = mean_heldout_ssim(params)
    elapsed = time.time() - t0
    vals = [row[2] for row in history]
    best_so_far_monotone = bool(np.all(np.diff(np.minimum.accumulate(vals)) <= 0))
    ok = after > before and best_so_far_monotone and elapsed <= 1800
    _report(11, ok, f"held-out SSIM {before:.4f} -> {after:.4f} "
                    f"(+{after - before:.4f}), {len(history)} epochs, {elapsed:.0f}s")
    assert after > before
    assert best_so_far_monotone
    assert elapsed <= 1800


def test_criterion_12_scalar_grid_oracle(scalar_model):
    # Independent oracle: exhaustive grid search of the scalar cost.
    us = np.arange(-3.0, 3.0 + 1e-12, 2e-3)
    zs = np.arange(0.05, 10.0 + 1e-12, 2e-3)
    f_grid = (1.0 - zs[None, :] * us[:, None]) ** 2 + 0.3 * us[:, None] ** 2 + 2.0 * np.log(zs[None, :]) ** 2
    i, j = np.unravel_index(np.argmin(f_grid), f_grid.shape)
    cfg = CglsConfig(lam=0.3, mu=2.0, k_max=5000, delta=1e-14, descent="newton")
    res = run_cgls(np.array([1.0]), scalar_model, cfg)
    du, dz = abs(res.u[0] - us[i]), abs(res.z[0] - zs[j])
    ok = _report(12, du < 5e-3 and dz < 5e-3,
                 f"|u - u_grid| = {du:.2e}, |z - z_grid| = {dz:.2e} (<5e-3)")
    assert ok
