"""Command-line entry point: train, sample, restore, benchmark, oracle-check.

Exit codes: 0 success, 1 flagged solver non-convergence (or a failed oracle
check), 2 usage or I/O error. Noise levels and ε are given in 0-255 gray
levels and converted to the [0, 1] pixel scale internally.
"""

import argparse
import hashlib
import json
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from jpmap import degradations as dg
from jpmap.dataio import FormatError, load_mnist, montage, read_pgm, write_csv, write_pgm
from jpmap.energy import EnergyCtx, GdConfig, j1
from jpmap.linops import DenseMatrix
from jpmap.oracle import LinearVae, analytic_joint_map, build_exact_vae, linear_posterior
from jpmap.solvers import (
    ContinuationConfig,
    JpmapConfig,
    csgm,
    default_beta_schedule,
    jpmap_continuation,
    jpmap_exact,
    jpmap_fast,
    mapz_splitting,
    mcsgm,
    pgd_gan,
    psnr,
    pulse,
)
from jpmap.vae import CheckpointError, TrainConfig, load_model, sample_prior, save_model, train_dvae

KINDS = ("denoise", "cs", "interp", "deblur", "sr")
METHODS = ("jpmap", "jpmap-beta", "splitting", "csgm", "mcsgm", "pulse", "pgdgan")
LATENT_METHODS = ("csgm", "mcsgm", "pulse", "pgdgan")
SUMMARY_FIELDS = ["method", "n", "psnr_mean", "psnr_stderr", "flagged"]


class UsageError(Exception):
    pass


def git_blob_sha1(data):
    """Content hash as computed by ``git hash-object``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir, args, model_path=None, extra=None):
    config = {k: v for k, v in vars(args).items() if k != "func"}
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()}
    manifest = {"subcommand": args.command, "config": config}
    if model_path is not None:
        manifest["checkpoint"] = {"path": str(model_path), "sha1": git_blob_sha1(Path(model_path).read_bytes())}
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- problem setup -----------------------------------------------------------


def check_problem_args(args):
    if args.problem == "interp" and not 0 <= args.p < 1:
        raise UsageError(f"interp requires 0 <= p < 1, got {args.p}")
    if args.problem == "cs" and args.q < 1:
        raise UsageError("cs requires q >= 1")
    if args.problem == "sr" and (args.s < 1 or 28 % args.s):
        raise UsageError(f"sr factor must divide 28, got {args.s}")
    if args.problem == "deblur" and (args.kernel_size < 1 or args.kernel_size % 2 == 0):
        raise UsageError("kernel size must be odd and positive")
    if args.noise <= 0:
        raise UsageError("noise must be positive (in gray levels)")
    if getattr(args, "epsilon", None) is not None and args.epsilon <= 0:
        raise UsageError("epsilon must be positive (in gray levels)")


def make_problem(args, d, seed):
    """Degradation for ``args.problem`` with operator randomness drawn from ``seed``."""
    sigma = args.noise / 255.0
    if args.problem == "denoise":
        return dg.make_denoising(d, sigma)
    if args.problem == "cs":
        return dg.make_compressed_sensing(args.q, d, sigma, seed)
    if args.problem == "interp":
        return dg.make_interpolation(args.p, d, sigma, seed)
    if args.problem == "deblur":
        return dg.make_deblur(dg.uniform_kernel(args.kernel_size), d, sigma)
    return dg.make_superres(args.s, d, sigma)


def solver_options(args):
    jcfg = JpmapConfig()
    n1 = jcfg.n1 if args.n1 is None else args.n1
    n2 = jcfg.n2 if args.n2 is None else args.n2
    n_max = jcfg.n_max if args.iters is None else args.iters
    jcfg = JpmapConfig(n1, n2, max(n_max, n2), GdConfig(max_iters=args.gd_iters))
    eps = None if args.epsilon is None else (args.epsilon / 255.0) ** 2 * dg.MNIST_SHAPE[0] * dg.MNIST_SHAPE[1]
    ccfg = ContinuationConfig(epsilon=eps, rho=args.rho, max_outer=args.max_outer)
    return jcfg, ccfg


def run_method(method, model, deg, rng, jcfg, ccfg, iters=None):
    """Run one method; returns ``(x_hat, z_hat, trace, flagged)``."""
    if method == "jpmap":
        x, z, trace = jpmap_continuation(model, deg, None, ccfg, jcfg)
        return x, z, trace, not trace.converged
    if method == "jpmap-beta":
        x, z, trace = jpmap_fast(EnergyCtx(model, deg), None, jcfg)
        return x, z, trace, False
    if method == "splitting":
        x, z, trace = mapz_splitting(model, deg, None, default_beta_schedule(model), jcfg.n_max, jcfg.gd)
        return x, z, trace, False
    steps = 1000 if iters is None else iters
    if method == "csgm":
        return (*csgm(model, deg, None, steps, rng), False)
    if method == "mcsgm":
        return (*mcsgm(model, deg, 10, steps, rng), False)
    if method == "pulse":
        return (*pulse(model, deg, None, steps, rng), False)
    return (*pgd_gan(model, deg, None, 100 if iters is None else iters, rng=rng), False)


def metrics_row(problem, method, seed, model, deg, truth, x, z, trace, timing):
    row = {
        "problem": problem,
        "method": method,
        "seed": seed,
        "psnr_db": psnr(x, truth) if truth is not None else "",
        "j1_final": j1(EnergyCtx(model, deg), x, z),
        "iterations": trace.iterations,
        "wall_ms": 1000.0 * trace.wall_time if timing else "",
        "constraint_residual": float(np.sum((model.decode(z) - x) ** 2)),
    }
    return row


def warn_ignored(args):
    if args.method in LATENT_METHODS and (args.epsilon is not None or args.rho != 0.5):
        warnings.warn(f"{args.method} has no ε constraint; --epsilon/--rho are ignored", stacklevel=2)


# -- subcommands -------------------------------------------------------------


def cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_mnist(args.data_dir, "train")
    if args.n_train:
        data = data[: args.n_train]
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        sigma_dvae=args.sigma_dvae / 255.0,
        seed=args.seed,
        latent_dim=args.latent_dim,
        hidden=tuple(args.hidden),
        gamma2_init=args.gamma2_init,
    )
    log = []

    def on_epoch(epoch, loss, model):
        log.append({"epoch": epoch + 1, "loss": loss, "gamma2": model.gamma2})
        if not args.quiet:
            print(f"epoch {epoch + 1}/{cfg.epochs} loss {loss:.4f} gamma2 {model.gamma2:.5f}", file=sys.stderr)

    model, _ = train_dvae(data, cfg, on_epoch=on_epoch)
    ckpt = out / "model.jvae"
    save_model(model, ckpt)
    write_csv(log, out / "loss.csv", ["epoch", "loss", "gamma2"])
    write_manifest(out, args, ckpt, {"n_train": len(data)})
    print(ckpt)
    return 0


def cmd_sample(args):
    model = load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    images = sample_prior(model, args.n, rng, z=np.zeros(model.latent_dim) if args.zero else None)
    if args.zero:
        path = out / "mode.pgm"
        write_pgm(images[0], *reversed(dg.MNIST_SHAPE), path)
    else:
        cols = math.ceil(math.sqrt(args.n))
        rows = math.ceil(args.n / cols)
        grid, (h, w) = montage(images, rows, cols, dg.MNIST_SHAPE)
        path = out / "samples.pgm"
        write_pgm(grid, w, h, path)
    write_manifest(out, args, args.model)
    print(path)
    return 0


def _observation_image(deg):
    """Something viewable for y: y itself when it is an image, else Aᵀy."""
    if deg.kind == "sr":
        side = dg.MNIST_SHAPE[0] // deg.params["s"]
        return deg.y, (side, side)
    if deg.y.size == deg.d:
        return deg.y, dg.MNIST_SHAPE
    return deg.back_projection(), dg.MNIST_SHAPE


def cmd_restore(args):
    check_problem_args(args)
    warn_ignored(args)
    model = load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.image:
        truth = read_pgm(args.image)
    else:
        truth = load_mnist(args.data_dir, "test")[args.index]
    if truth.size != model.data_dim:
        raise UsageError(f"image has {truth.size} pixels, model expects {model.data_dim}")
    root = np.random.SeedSequence(args.seed)
    op_seq, noise_seq, method_seq = root.spawn(3)
    deg = make_problem(args, model.data_dim, op_seq)
    dg.degrade(deg, truth, np.random.default_rng(noise_seq))
    jcfg, ccfg = solver_options(args)
    x, z, trace, flagged = run_method(args.method, model, deg, np.random.default_rng(method_seq), jcfg, ccfg, args.iters)

    obs, (h, w) = _observation_image(deg)
    write_pgm(obs, w, h, out / "degraded.pgm")
    write_pgm(x, 28, 28, out / "restored.pgm")
    write_pgm(truth, 28, 28, out / "truth.pgm")
    row = metrics_row(args.problem, args.method, args.seed, model, deg, truth, x, z, trace, True)
    write_csv([row], out / "metrics.csv")
    write_manifest(out, args, args.model, {"flagged": flagged, "message": trace.message})
    print(f"{args.method} {args.problem}: PSNR {row['psnr_db']:.2f} dB, residual {row['constraint_residual']:.4g}")
    if flagged:
        print(f"warning: {trace.message}", file=sys.stderr)
        return 1
    return 0


_WORKER = {}


def _init_worker(model_path):
    _WORKER["model"] = load_model(model_path)


def _bench_problem(task):
    index, truth, seed, args = task
    model = _WORKER["model"]
    root = np.random.SeedSequence([seed, index])
    op_seq, noise_seq, method_seq = root.spawn(3)
    deg = make_problem(args, model.data_dim, op_seq)
    dg.degrade(deg, truth, np.random.default_rng(noise_seq))
    jcfg, ccfg = solver_options(args)
    rows = []
    for method, mseq in zip(args.methods, method_seq.spawn(len(args.methods))):
        x, z, trace, flag = run_method(method, model, deg, np.random.default_rng(mseq), jcfg, ccfg, args.iters)
        row = metrics_row(f"{args.problem}-{index:04d}", method, seed, model, deg, truth, x, z, trace, args.timing)
        row["flagged"] = flag
        rows.append(row)
    return rows


def summarize(rows, methods):
    summary = []
    for method in methods:
        vals = np.array([r["psnr_db"] for r in rows if r["method"] == method], dtype=np.float64)
        stderr = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        flagged = sum(r["flagged"] for r in rows if r["method"] == method)
        summary.append(
            {"method": method, "n": len(vals), "psnr_mean": float(vals.mean()), "psnr_stderr": stderr, "flagged": flagged}
        )
    return summary


def cmd_benchmark(args):
    check_problem_args(args)
    for m in args.methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if args.jobs < 1 or args.n < 1:
        raise UsageError("--jobs and --n must be positive")
    if not Path(args.model).is_file():
        raise FileNotFoundError(f"model file not found: {args.model}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = load_mnist(args.data_dir, "test")
    if args.n > len(images):
        raise UsageError(f"--n {args.n} exceeds the {len(images)} available test images")
    tasks = [(i, images[i], args.seed, args) for i in range(args.n)]
    if args.jobs == 1:
        _init_worker(args.model)
        results = [_bench_problem(t) for t in tasks]
    else:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker, initargs=(str(args.model),)) as pool:
            results = list(pool.map(_bench_problem, tasks))
    rows = sorted((r for rs in results for r in rs), key=lambda r: (r["problem"], r["method"]))
    flagged = sum(r["flagged"] for r in rows)
    write_csv(rows, out / "results.csv")
    summary = summarize(rows, args.methods)
    for s in summary:
        print(f"{s['method']:>11}: PSNR {s['psnr_mean']:.2f} ± {s['psnr_stderr']:.2f} dB over {s['n']} images")
    write_csv(summary, out / "summary.csv", SUMMARY_FIELDS)
    write_manifest(out, args, args.model, {"flagged": flagged})
    if flagged:
        print(f"warning: {flagged} run(s) flagged non-convergence", file=sys.stderr)
        return 1
    return 0


def oracle_trial(rng, d, l, kind):
    lv = LinearVae.random(d, l, rng)
    sigma = rng.uniform(0.05, 0.3)
    if kind == "denoise":
        deg = dg.make_denoising(d, sigma)
    elif kind == "interp":
        deg = dg.make_interpolation(0.5, d, sigma, rng)
    else:
        q = max(1, d // 2)
        deg = dg.Degradation(DenseMatrix(rng.standard_normal((q, d)) / math.sqrt(q)), sigma, kind="cs")
    x_true = lv.decode(rng.standard_normal(l))
    dg.degrade(deg, x_true, rng)
    model = build_exact_vae(lv)
    ctx = EnergyCtx(model, deg)
    x_star, z_star = analytic_joint_map(lv, deg)
    x, z, trace = jpmap_exact(ctx, maxiter=200)
    err = max(
        np.linalg.norm(x - x_star) / max(np.linalg.norm(x_star), 1e-300),
        np.linalg.norm(z - z_star) / max(np.linalg.norm(z_star), 1e-300),
    )
    probe = rng.uniform(0, 1, d)
    enc_err = float(np.max(np.abs(model.encode(probe)[0] - linear_posterior(lv, probe)[0])))
    return err, enc_err, trace.iterations


def cmd_oracle_check(args):
    if not args.tol > 0 or args.dim < 1 or args.latent < 1 or args.trials < 1:
        raise UsageError("--tol, --dim, --latent and --trials must be positive")
    if args.dim > 200:
        raise UsageError("--dim is limited to 200 for the dense oracle")
    rng = np.random.default_rng(args.seed)
    kinds = ("denoise", "cs", "interp")
    failures = 0
    for t in range(args.trials):
        kind = kinds[t % len(kinds)]
        err, enc_err, iters = oracle_trial(rng, args.dim, args.latent, kind)
        ok = err <= args.tol and enc_err <= args.encoder_tol and iters <= 200
        failures += not ok
        print(f"trial {t:3d} {kind:>7}: rel_err {err:.2e} enc_err {enc_err:.2e} iters {iters:3d} {'PASS' if ok else 'FAIL'}")
    print(f"{args.trials - failures}/{args.trials} trials passed (d={args.dim}, l={args.latent}, tol {args.tol:g})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args, extra={"failures": failures})
    if failures:
        print(f"FAIL: {failures} oracle trial(s) outside tolerance", file=sys.stderr)
        return 1
    return 0


# -- parser ------------------------------------------------------------------


def _add_problem_args(p):
    p.add_argument("--problem", choices=KINDS, default="interp")
    p.add_argument("--p", type=float, default=0.8, help="missing-pixel fraction (interp)")
    p.add_argument("--q", type=int, default=100, help="number of measurements (cs)")
    p.add_argument("--s", type=int, default=2, help="decimation factor (sr)")
    p.add_argument("--kernel-size", type=int, default=3, help="uniform blur size (deblur)")
    p.add_argument("--noise", type=float, default=10.0, help="noise std in gray levels")
    p.add_argument("--n1", type=int, default=None)
    p.add_argument("--n2", type=int, default=None)
    p.add_argument("--iters", type=int, default=None, help="n_max for JPMAP, steps for baselines")
    p.add_argument("--gd-iters", type=int, default=500, help="inner latent gradient steps")
    p.add_argument("--epsilon", type=float, default=None, help="RMS constraint in gray levels (default 3)")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--max-outer", type=int, default=50)


def build_parser():
    parser = argparse.ArgumentParser(prog="jpmap", description="Joint MAP restoration with a denoising VAE prior.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a denoising VAE on MNIST")
    p.add_argument("--data-dir", default=None, help="MNIST IDX directory (default $JPMAP_DATA_DIR)")
    p.add_argument("--out", default="run")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--sigma-dvae", type=float, default=15.0, help="training noise in gray levels")
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--hidden", type=int, nargs="+", default=[500, 500])
    p.add_argument("--gamma2-init", type=float, default=0.1)
    p.add_argument("--n-train", type=int, default=0, help="use only the first N training images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="decode prior samples into a PGM montage")
    p.add_argument("--model", required=True)
    p.add_argument("--out", default="run")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero", action="store_true", help="decode z = 0 (the prior mode)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("restore", help="restore one degraded image")
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--image", default=None, help="ground-truth PGM instead of a test digit")
    p.add_argument("--index", type=int, default=0, help="test-set digit index")
    p.add_argument("--method", choices=METHODS, default="jpmap")
    p.add_argument("--out", default="run")
    p.add_argument("--seed", type=int, default=0)
    _add_problem_args(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("benchmark", help="run methods over a batch of test digits")
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--methods", type=lambda s: s.split(","), default=["jpmap", "csgm"])
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="fill wall_ms (breaks bit-reproducibility)")
    p.add_argument("--out", default="run")
    p.add_argument("--seed", type=int, default=0)
    _add_problem_args(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("oracle-check", help="check exact JPMAP against the linear-VAE closed form")
    p.add_argument("--dim", type=int, default=30)
    p.add_argument("--latent", type=int, default=4)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--encoder-tol", type=float, default=1e-10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"jpmap {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, FormatError) as exc:
        print(f"jpmap {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
