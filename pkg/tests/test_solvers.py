import math

import numpy as np
import pytest

from jpmap import degradations as dg
from jpmap.energy import EnergyCtx, GdConfig, j1_grad_x, j1_grad_z
from jpmap.linops import as_dense
from jpmap.oracle import LinearVae, analytic_joint_map, build_exact_vae
from jpmap.solvers import (
    ContinuationConfig,
    JpmapConfig,
    csgm,
    default_epsilon,
    jpmap_approx,
    jpmap_continuation,
    jpmap_exact,
    jpmap_fast,
    mapz_objective,
    mapz_splitting,
    mcsgm,
    pgd_gan,
    project_to_range,
    psnr,
    pulse,
)
from jpmap.vae import VaeModel

SMALL = JpmapConfig(n1=3, n2=6, n_max=15, gd=GdConfig(max_iters=40, patience=10))


def linear_problem(rng, d=20, l=3, kind="cs"):
    lv = LinearVae.random(d, l, rng)
    if kind == "cs":
        deg = dg.make_compressed_sensing(d // 2, d, 0.1, seed=int(rng.integers(1 << 30)))
    elif kind == "interp":
        deg = dg.make_interpolation(0.5, d, 0.1, seed=int(rng.integers(1 << 30)))
    else:
        deg = dg.make_denoising(d, 0.1)
    dg.degrade(deg, lv.decode(rng.standard_normal(l)), rng)
    return lv, build_exact_vae(lv), deg


def net_problem(rng, d=16, l=2):
    model = VaeModel.create(d, l, (12, 10), rng, gamma2=0.05)
    deg = dg.make_interpolation(0.5, d, 0.1, seed=int(rng.integers(1 << 30)))
    dg.degrade(deg, rng.random(d), rng)
    return model, deg


# -- exact alternation -------------------------------------------------------


def test_exact_matches_analytic(rng):
    for kind in ("cs", "interp", "denoise"):
        lv, model, deg = linear_problem(rng, kind=kind)
        x, z, trace = jpmap_exact(EnergyCtx(model, deg))
        xs, zs = analytic_joint_map(lv, deg)
        assert trace.converged and trace.iterations <= 200
        assert np.linalg.norm(x - xs) <= 1e-6 * np.linalg.norm(xs)
        assert np.linalg.norm(z - zs) <= 1e-6 * np.linalg.norm(zs)


def test_exact_fixed_point(rng):
    lv, model, deg = linear_problem(rng)
    xs, _ = analytic_joint_map(lv, deg)
    x, _, _ = jpmap_exact(EnergyCtx(model, deg), xs, maxiter=1)
    assert np.max(np.abs(x - xs)) < 1e-10


def test_exact_tiny_noise_recovers_observation(rng):
    lv = LinearVae.random(15, 2, rng)
    deg = dg.make_denoising(15, 1e-8)
    deg.y = rng.random(15)
    x, _, _ = jpmap_exact(EnergyCtx(build_exact_vae(lv), deg))
    assert np.max(np.abs(x - deg.y)) < 1e-6


# -- approximate alternation -------------------------------------------------


def test_approx_monotone(rng):
    for _ in range(10):
        model, deg = net_problem(rng)
        _, _, trace = jpmap_approx(EnergyCtx(model, deg), maxiter=15, gd=GdConfig(max_iters=30))
        assert trace.monotone_violations() == []


def test_approx_candidates_coincide_on_linear_vae(rng):
    lv, model, deg = linear_problem(rng)
    gd = GdConfig(lr=0.01, max_iters=3000, grad_tol=1e-8, patience=200)
    _, _, trace = jpmap_approx(EnergyCtx(model, deg), maxiter=3, gd=gd)
    for rec in trace.records[1:]:
        e = np.array(rec.candidates)
        assert e.max() - e.min() <= 1e-6 * abs(e.min())


def test_branch_shift_on_mnist(desk_model, mnist_test):
    deg = dg.make_interpolation(0.8, 784, 10 / 255, seed=0)
    dg.degrade(deg, mnist_test[0], np.random.default_rng(0))
    cfg = JpmapConfig(n1=10, n2=20, n_max=30, gd=GdConfig(max_iters=50), energy_rel_tol=0)
    _, _, trace = jpmap_fast(EnergyCtx(desk_model, deg), cfg=cfg)
    branches = trace.branches()[1:]
    early, late = branches[:5], branches[-5:]
    assert sum(b in (1, 2) for b in early) >= 3
    assert all(b == 3 for b in late)


# -- fast ladder -------------------------------------------------------------


def test_fast_without_ladder_is_branch_three(rng):
    model, deg = net_problem(rng)
    cfg = JpmapConfig(0, 0, 10, GdConfig(max_iters=20), energy_rel_tol=0)
    _, _, trace = jpmap_fast(EnergyCtx(model, deg), cfg=cfg)
    assert trace.branches()[1:] == [3] * 10
    assert trace.monotone_violations() == []


def test_fast_not_above_exact(rng):
    lv, model, deg = linear_problem(rng)
    ctx = EnergyCtx(model, deg)
    _, _, exact = jpmap_exact(ctx, maxiter=30, tol=0)
    ee = exact.energies()
    # ladder open throughout: the encoder candidate is always available
    _, _, fast = jpmap_fast(ctx, cfg=JpmapConfig(5, 30, 30, GdConfig(max_iters=50), energy_rel_tol=0))
    assert np.all(fast.energies()[1:] <= ee + 1e-9)
    # after n2 only gradient descent runs, so the gap is bounded by its accuracy
    _, _, fast = jpmap_fast(ctx, cfg=JpmapConfig(5, 10, 30, GdConfig(max_iters=50), energy_rel_tol=0))
    assert np.all(fast.energies()[1:] <= ee + 1e-6 * np.abs(ee))


def test_fast_stopping_rule(rng):
    model, deg = net_problem(rng)
    cfg = JpmapConfig(2, 4, 300, GdConfig(max_iters=50), energy_rel_tol=1e-6, window=5)
    _, _, trace = jpmap_fast(EnergyCtx(model, deg), cfg=cfg)
    assert trace.converged and trace.iterations < 300
    e = trace.energies()
    assert abs(e[-6] - e[-1]) <= 1e-6 * abs(e[-1])
    assert all(abs(e[k - 5] - e[k]) > 1e-6 * abs(e[k]) for k in range(5, len(e) - 1))


def test_fast_grad_flag_means_stationary(rng):
    lv, model, deg = linear_problem(rng)
    ctx = EnergyCtx(model, deg)
    x, z, trace = jpmap_fast(ctx, cfg=JpmapConfig(5, 10, 50, GdConfig(lr=0.01, max_iters=2000, grad_tol=1e-6)))
    assert trace.grad_ok == (np.max(np.abs(j1_grad_z(ctx, x, z))) <= 1e-6)
    assert np.max(np.abs(j1_grad_x(ctx, x, z))) <= 1e-6 / deg.sigma**2


# -- continuation and splitting ----------------------------------------------


def test_continuation_huge_epsilon(rng):
    model, deg = net_problem(rng)
    ccfg = ContinuationConfig(epsilon=1e6)
    _, _, trace = jpmap_continuation(model, deg, ccfg=ccfg, jcfg=SMALL)
    assert trace.converged and trace.extra["outer_iterations"] == 1
    assert trace.extra["betas"] == [1 / model.gamma2]


def test_continuation_beta_increases_while_violated(rng):
    model, deg = net_problem(rng)
    ccfg = ContinuationConfig(epsilon=1e-4, max_outer=6)
    _, _, trace = jpmap_continuation(model, deg, ccfg=ccfg, jcfg=SMALL)
    betas, viol = trace.extra["betas"], trace.extra["violations"]
    for k in range(len(betas) - 1):
        if viol[k] > 0:
            assert betas[k + 1] > betas[k]
    assert trace.monotone_violations() == []


def test_continuation_flags_exhaustion(rng):
    model, deg = net_problem(rng)
    ccfg = ContinuationConfig(epsilon=1e-12, max_outer=2)
    x, z, trace = jpmap_continuation(model, deg, ccfg=ccfg, jcfg=SMALL)
    assert not trace.converged and "not met" in trace.message
    assert x is not None and z is not None


def test_default_epsilon():
    assert default_epsilon(784) == pytest.approx((3 / 255) ** 2 * 784)


def test_splitting_single_stage_is_fast(rng):
    model, deg = net_problem(rng)
    gd = GdConfig(max_iters=20)
    x1, z1, _ = mapz_splitting(model, deg, betas=[1 / model.gamma2], maxiter=8, gd=gd)
    x2, z2, _ = jpmap_fast(EnergyCtx(model, deg), cfg=JpmapConfig(0, 0, 8, gd, energy_rel_tol=0))
    np.testing.assert_array_equal(x1, x2)
    np.testing.assert_array_equal(z1, z2)


def test_splitting_residual_shrinks_on_linear_vae(rng):
    lv, model, deg = linear_problem(rng)
    gd = GdConfig(lr=0.01, max_iters=500)
    _, _, trace = mapz_splitting(model, deg, maxiter=20, gd=gd)
    res = trace.extra["stage_residuals"]
    assert all(b < a for a, b in zip(res, res[1:]))
    assert trace.monotone_violations() == []


# -- baselines ---------------------------------------------------------------


def _linear_mapz_optimum(lv, deg):
    A = as_dense(deg.op)
    AV = A @ lv.V
    s2 = deg.sigma**2
    return np.linalg.solve(AV.T @ AV / s2 + np.eye(lv.l), AV.T @ (deg.y - A @ lv.v) / s2)


def test_csgm_stays_at_optimum(rng):
    lv, model, deg = linear_problem(rng)
    z_star = _linear_mapz_optimum(lv, deg)
    _, z, trace = csgm(model, deg, z_star, iters=200)
    assert np.max(np.abs(z - z_star)) < 1e-8
    assert trace.extra["objective"] == pytest.approx(mapz_objective(model, deg, z_star), abs=1e-10)


def test_csgm_converges_on_linear_vae(rng):
    lv, model, deg = linear_problem(rng)
    _, z, _ = csgm(model, deg, iters=3000, rng=rng)
    assert np.max(np.abs(z - _linear_mapz_optimum(lv, deg))) < 1e-4


def test_mcsgm_not_worse_than_members(rng):
    model, deg = net_problem(rng)
    _, z, trace = mcsgm(model, deg, m=4, iters=50, rng=np.random.default_rng(9))
    objs = trace.extra["restart_objectives"]
    assert trace.extra["objective"] == min(objs)
    single = [csgm(model, deg, z0, 50)[2].extra["objective"] for z0 in np.random.default_rng(9).standard_normal((4, 2))]
    assert min(objs) <= min(single)


def test_pulse_sphere(rng):
    model = VaeModel.create(16, 8, (12,), rng, gamma2=0.05)
    deg = dg.make_interpolation(0.5, 16, 0.1, seed=1)
    dg.degrade(deg, rng.random(16), rng)
    _, z, trace = pulse(model, deg, iters=300, rng=rng)
    assert trace.extra["radius"] == pytest.approx(2.8284271247461903)
    assert all(abs(n - math.sqrt(8)) < 1e-10 for n in trace.extra["norms"])
    with pytest.raises(ValueError):
        pulse(model, deg, z0=np.zeros(8))


def test_projection_matches_least_squares(rng):
    for _ in range(5):
        lv = LinearVae.random(20, 3, rng)
        model = build_exact_vae(lv)
        w = rng.random(20)
        z_ls = np.linalg.solve(lv.V.T @ lv.V, lv.V.T @ (w - lv.v))
        z, _ = project_to_range(model, w, model.encode(w)[0], iters=3000)
        assert np.max(np.abs(z - z_ls)) < 1e-5


def test_pgd_gan_stationary_on_range(rng):
    lv = LinearVae.random(20, 3, rng)
    model = build_exact_vae(lv)
    deg = dg.make_compressed_sensing(10, 20, 0.1, seed=2)
    x0 = lv.decode(rng.standard_normal(3))
    deg.y = deg.op.apply(x0)
    x, _, _ = pgd_gan(model, deg, x0, iters=5, inner_iters=3000)
    assert np.max(np.abs(x - x0)) < 1e-5


def test_pgd_gan_zero_step(rng):
    model, deg = net_problem(rng)
    x0 = rng.random(16)
    _, _, trace = pgd_gan(model, deg, x0, iters=4, eta=0.0, inner_iters=50)
    res = trace.extra["projection_residuals"]
    # later iterates re-project an image already on the range
    assert all(r <= res[0] + 1e-12 for r in res[1:])


def test_psnr_examples():
    x = np.full(10, 0.5)
    assert psnr(x, x) == 99.0
    assert psnr(x + 0.1, x) == pytest.approx(20.0)
    assert psnr(x + 10 / 255, x) == pytest.approx(20 * math.log10(25.5))


def test_traces_are_deterministic(rng):
    model, deg = net_problem(rng)
    runs = [
        lambda: jpmap_fast(EnergyCtx(model, deg), cfg=SMALL),
        lambda: jpmap_continuation(model, deg, ccfg=ContinuationConfig(max_outer=3), jcfg=SMALL),
        lambda: csgm(model, deg, iters=30, rng=np.random.default_rng(1)),
        lambda: pulse(model, deg, iters=30, rng=np.random.default_rng(1)),
        lambda: pgd_gan(model, deg, iters=3, inner_iters=20),
    ]
    for run in runs:
        assert run()[2].fingerprint() == run()[2].fingerprint()
