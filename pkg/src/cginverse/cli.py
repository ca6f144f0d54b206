"""Command-line surface: data synthesis, reconstruction, training, evaluation,
and theory verification.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 theory-check
failure.  Every command writes a manifest into its output directory before
any other output, and never mutates its input dataset.  CG_INVERSE_THREADS
caps the number of worker processes used for per-sample reconstruction.
"""

import argparse
import datetime
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import __version__, io, metrics, model as model_mod, net as net_mod, theory
from .phantoms import shepp_logan
from .solver import CglsConfig, config_from_mapping, run_cgls

E = math.e


def _write_manifest(out_dir: str, command: str, args: argparse.Namespace) -> None:
    os.makedirs(out_dir, exist_ok=True)
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    io.save_keyvalue(
        os.path.join(out_dir, "manifest.txt"),
        {
            "command": command,
            "config_path": getattr(args, "config", "") or "",
            "seed": getattr(args, "seed", ""),
            "output_dir": out_dir,
            "tool_version": __version__,
            "started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "flags": " ".join(f"{k}={v}" for k, v in flags.items()),
        },
    )


def _worker_count() -> int:
    raw = os.environ.get("CG_INVERSE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"CG_INVERSE_THREADS must be an integer, got {raw!r}")


def _limit_blas_threads():
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1)
    except Exception:
        pass


# ---------------------------------------------------------------------------
# gen-data


def _parse_snr(text: str) -> float:
    return math.inf if text.strip().lower() in ("inf", "+inf", "infinity") else float(text)


def cmd_gen_data(args: argparse.Namespace) -> int:
    snr = _parse_snr(args.snr)
    n_side = args.n_side
    if args.images is None and args.phantom is None:
        raise ValueError("one of --images or --phantom is required")

    if args.operator == "radon":
        psi = model_mod.build_radon_matrix(n_side, args.angles)
        op_desc = f"radon-{args.angles}"
    elif args.operator == "gaussian":
        m = max(1, round(args.sampling_ratio * n_side * n_side))
        psi = model_mod.build_gaussian_matrix(m, n_side * n_side, args.seed)
        op_desc = f"gaussian-{args.sampling_ratio}"
    else:
        raise ValueError(f"unknown operator {args.operator!r}")

    if args.dict == "wavelet":
        phi = model_mod.build_wavelet_dictionary(n_side, model_mod.default_wavelet_levels(n_side))
    elif args.dict == "dct":
        phi = model_mod.build_dct_dictionary(n_side)
    else:
        raise ValueError(f"unknown dictionary {args.dict!r}")

    mdl = model_mod.make_model(psi, phi, n_side, f"{op_desc}/{args.dict}/snr={args.snr}")
    _write_manifest(args.out, "gen-data", args)
    model_mod.save_model(os.path.join(args.out, "model"), mdl)
    mhash = mdl.content_hash()

    if args.images is not None:
        names = sorted(
            f for f in os.listdir(args.images) if f.lower().endswith(".pgm")
        )[: args.count or None]
        if not names:
            raise ValueError(f"{args.images}: no readable PGM images found")
        images = []
        for name in names:
            img = io.load_pgm(os.path.join(args.images, name))
            if img.shape != (n_side, n_side):
                raise ValueError(f"{name}: image is {img.shape}, model wants {(n_side, n_side)}")
            images.append(img)
    else:
        images = [shepp_logan(n_side, seed=args.seed + i, perturb=0.05) for i in range(args.count)]

    for i, img in enumerate(images):
        sample = model_mod.synthesize_measurement(mdl, img.ravel(), snr, args.seed + 1000 + i)
        model_mod.save_sample(
            os.path.join(args.out, "samples", f"sample_{i:04d}"), sample, mhash, image=img
        )
    print(f"gen-data: wrote {len(images)} samples to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# reconstruct


def method_config(method: str, n_side: int, base: CglsConfig | None = None) -> CglsConfig:
    """Solver defaults for the two standard methods.

    gcgls: gradient descent, init window (1, e^2), no input scaling.
    ncgls: Newton descent, init window (1, e), input scaled by e^-4 for
    images up to 32x32 and e^-6 for larger ones.
    """
    cfg = base or CglsConfig()
    if method == "gcgls":
        return replace(cfg, descent="gradient", init_mrelu=(1.0, E**2), scale_s=1.0)
    if method == "ncgls":
        scale = E**-4 if (n_side and n_side <= 32) else E**-6
        return replace(cfg, descent="newton", init_mrelu=(1.0, E), scale_s=scale)
    raise ValueError(f"unknown method {method!r}; expected gcgls or ncgls")


def _reconstruct_one(task):
    y, mdl, cfg = task
    _limit_blas_threads()
    res = run_cgls(y, mdl, cfg)
    # The solver estimates coefficients for the scaled measurement s*y, so
    # the estimate for y itself needs the scale divided back out.
    return res.c_star / cfg.scale_s, res.trace


def reconstruct_samples(dataset, cfg: CglsConfig, workers: int = 1):
    """Run the solver over all samples; returns list of (c_hat, trace)."""
    tasks = [(s.y, dataset.model, cfg) for s in dataset.samples]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_reconstruct_one, tasks))
    return [_reconstruct_one(t) for t in tasks]


def _metric_rows(dataset, c_hats):
    n_side = dataset.model.n_side
    rows = []
    for i, (sample, c_hat) in enumerate(zip(dataset.samples, c_hats)):
        x_hat = np.clip(dataset.model.image_from_coefficients(c_hat), 0.0, 1.0).reshape(n_side, n_side)
        x_true = np.clip(dataset.model.image_from_coefficients(sample.c), 0.0, 1.0).reshape(n_side, n_side)
        rows.append((i, metrics.ssim(x_hat, x_true), metrics.psnr(x_hat, x_true), x_hat))
    return rows


def _write_metrics(out_dir, rows, table_layout=False):
    scale = 100.0 if table_layout else 1.0
    lines = ["sample_id,ssim,psnr"]
    for i, s, p, _ in rows:
        lines.append(f"{i},{'%.17g' % (scale * s)},{'%.17g' % p}")
    io.atomic_write_text(os.path.join(out_dir, "metrics.csv"), "\n".join(lines) + "\n")
    ssim_mean, ssim_ci = metrics.mean_ci99([r[1] for r in rows])
    psnr_mean, psnr_ci = metrics.mean_ci99([r[2] for r in rows])
    lines = [
        "metric,mean,ci99_half_width",
        f"ssim,{'%.17g' % (scale * ssim_mean)},{'%.17g' % (scale * ssim_ci)}",
        f"psnr,{'%.17g' % psnr_mean},{'%.17g' % psnr_ci}",
    ]
    io.atomic_write_text(os.path.join(out_dir, "summary.csv"), "\n".join(lines) + "\n")
    return ssim_mean, ssim_ci, psnr_mean, psnr_ci


def cmd_reconstruct(args: argparse.Namespace) -> int:
    dataset = model_mod.load_dataset(args.data)
    base = None
    if args.config:
        sections = io.read_config(args.config)
        if "solver" in sections:
            base = config_from_mapping(sections["solver"])
    cfg = method_config(args.method, dataset.model.n_side, base)
    _write_manifest(args.out, "reconstruct", args)
    results = reconstruct_samples(dataset, cfg, workers=_worker_count())
    c_hats = [c for c, _ in results]
    rows = _metric_rows(dataset, c_hats)
    for (i, _, _, x_hat), (c_hat, trace) in zip(rows, results):
        d = os.path.join(args.out, f"sample_{i:04d}")
        os.makedirs(d, exist_ok=True)
        io.save_vector_csv(os.path.join(d, "c_star.csv"), c_hat)
        io.save_pgm(os.path.join(d, "recon.pgm"), x_hat)
        trace.to_csv(os.path.join(d, "trace.csv"))
    ssim_mean, ssim_ci, psnr_mean, psnr_ci = _write_metrics(args.out, rows)
    print(
        f"reconstruct[{args.method}]: {len(rows)} samples, "
        f"SSIM {ssim_mean:.4f} +- {ssim_ci:.4f}, PSNR {psnr_mean:.2f} +- {psnr_ci:.2f} dB"
    )
    return 0


# ---------------------------------------------------------------------------
# train


def _lambda_init_for(dataset) -> float:
    """Per-layer ridge weight init: 1e2 for Gaussian (compressive-sensing)
    operators, else 0.3 at high SNR (>= 50 dB) and 2 otherwise."""
    desc = dataset.model.description
    if desc.startswith("gaussian"):
        return 1e2
    snr = min((s.snr_db for s in dataset.samples), default=60.0)
    return 0.3 if snr >= 50.0 else 2.0


def _net_config_from(args, dataset) -> tuple[net_mod.NetConfig, net_mod.TrainConfig]:
    n_side = dataset.model.n_side
    k_default = 20 if n_side <= 32 else 5
    sections = io.read_config(args.config) if args.config else {}
    cg = sections.get("cgnet", {})
    tr = sections.get("train", {})
    ncfg = net_mod.NetConfig(
        k=int(cg.get("k", k_default)),
        j=int(cg.get("j", 1)),
        lam_init=float(cg.get("lambda_init", _lambda_init_for(dataset))),
        eps_guard=float(cg.get("eps_guard", 1e-6)),
        eps_psd=float(cg.get("eps_psd", 1e-6)),
    )
    tcfg = net_mod.TrainConfig(
        epochs=args.epochs if args.epochs is not None else int(tr.get("epochs", 30)),
        learning_rate=args.lr if args.lr is not None else float(tr.get("learning_rate", 1e-3)),
        batch_size=int(tr["batch_size"]) if "batch_size" in tr else None,
        early_stopping=(
            int(tr.get("patience", 10)),
            float(tr.get("validation_fraction", 0.25)),
        ),
        loss=tr.get("loss", "ssim"),
        b_mode=cg.get("b_mode", "learned"),
        seed=args.seed,
    )
    return ncfg, tcfg


def cmd_train(args: argparse.Namespace) -> int:
    dataset = model_mod.load_dataset(args.data)
    samples = dataset.samples
    if args.train_size is not None:
        if args.train_size > len(samples):
            raise ValueError(f"--train-size {args.train_size} exceeds dataset size {len(samples)}")
        picks = np.random.default_rng(args.seed).permutation(len(samples))[: args.train_size]
        samples = [samples[i] for i in sorted(picks)]
    ncfg, tcfg = _net_config_from(args, dataset)
    _write_manifest(args.out, "train", args)
    params, history = net_mod.train(samples, dataset.model, ncfg, tcfg)
    net_mod.save_checkpoint(params, os.path.join(args.out, "checkpoint.csv"))
    net_mod.save_history_csv(os.path.join(args.out, "history.csv"), history)
    best = min(history, key=lambda r: r[2])
    print(
        f"train: {len(history)} epochs on {len(samples)} samples, "
        f"best val loss {best[2]:.6f} at epoch {best[0]}; checkpoint in {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = model_mod.load_dataset(args.data)
    if not dataset.samples:
        raise ValueError("empty test set")
    if (args.checkpoint is None) == (args.method is None):
        raise ValueError("exactly one of --checkpoint or --method is required")
    _write_manifest(args.out, "eval", args)
    if args.checkpoint is not None:
        params = net_mod.load_checkpoint(args.checkpoint, expect_n=dataset.model.n)
        b_mode = "learned"
        if args.config:
            b_mode = io.read_config(args.config).get("cgnet", {}).get("b_mode", "learned")
        c_hats = [net_mod.forward(s.y, params, dataset.model, b_mode=b_mode) for s in dataset.samples]
        label = f"checkpoint:{os.path.basename(args.checkpoint)}"
    else:
        cfg = method_config(args.method, dataset.model.n_side)
        results = reconstruct_samples(dataset, cfg, workers=_worker_count())
        c_hats = [c for c, _ in results]
        label = args.method
    rows = _metric_rows(dataset, c_hats)
    ssim_mean, ssim_ci, psnr_mean, psnr_ci = _write_metrics(args.out, rows, table_layout=True)
    print(
        f"eval[{label}]: {len(rows)} samples, SSIM(x100) {100 * ssim_mean:.1f} +- {100 * ssim_ci:.2f}, "
        f"PSNR {psnr_mean:.1f} +- {psnr_ci:.2f} dB"
    )
    return 0


# ---------------------------------------------------------------------------
# verify-theory


def cmd_verify_theory(args: argparse.Namespace) -> int:
    names = sorted(theory.ALL_CHECKS) if args.check == "all" else [args.check]
    _write_manifest(args.out, "verify-theory", args)
    reports = theory.run_checks(names, args.instances, args.seed, args.out)
    failed = False
    for rep in reports:
        print(rep.summary_line())
        if rep.notes:
            print(f"  note: {rep.notes}")
        failed = failed or not rep.passed
    return 3 if failed else 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cginverse",
        description="Compound-Gaussian solvers and unrolled network for linear inverse problems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a measurement/coefficient dataset")
    p.add_argument("--images", help="directory of PGM images (alternative to --phantom)")
    p.add_argument("--phantom", choices=["shepp-logan"], help="use perturbed analytic phantoms")
    p.add_argument("--n-side", type=int, default=32, dest="n_side")
    p.add_argument("--operator", choices=["radon", "gaussian"], default="radon")
    p.add_argument("--angles", type=int, default=15)
    p.add_argument("--sampling-ratio", type=float, default=0.5, dest="sampling_ratio")
    p.add_argument("--dict", choices=["wavelet", "dct"], default="wavelet")
    p.add_argument("--snr", default="60")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("reconstruct", help="solve each sample with gcgls or ncgls")
    p.add_argument("--method", choices=["gcgls", "ncgls"], required=True)
    p.add_argument("--config", help="key = value config file ([solver] section)")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train the unrolled network on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="config file ([cgnet]/[train] sections)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--train-size", type=int, default=None, dest="train_size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or solver over a test set")
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=["gcgls", "ncgls"])
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-theory", help="run convergence-theory certification checks")
    p.add_argument("--check", choices=sorted(theory.ALL_CHECKS) + ["all"], required=True)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_verify_theory)

    return parser


def main(argv=None) -> int:
    # Threaded BLAS loses badly on the many mid-size factorizations this tool
    # runs, especially under container CPU quotas; worker processes provide
    # the parallelism instead (CG_INVERSE_THREADS).
    _limit_blas_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
