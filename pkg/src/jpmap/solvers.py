"""Joint (image, latent) MAP solvers and latent-space baselines.

Every solver returns ``(x_hat, z_hat, trace)``. The trace keeps one
:class:`TraceRecord` per outer iteration; see :class:`SolverTrace`.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from jpmap.degradations import data_term_f
from jpmap.energy import EnergyCtx, GdConfig, gd_refine_z, j1, j1_grad_z, x_step, z_step_approx
from jpmap.linops import normal_max_eigenvalue

PSNR_CAP = 99.0


@dataclass
class JpmapConfig:
    n1: int = 25
    n2: int = 150
    n_max: int = 300
    gd: GdConfig = field(default_factory=GdConfig)
    energy_rel_tol: float = 1e-6
    window: int = 5

    def __post_init__(self):
        if not 0 <= self.n1 <= self.n2 <= self.n_max:
            raise ValueError(f"need 0 <= n1 <= n2 <= n_max, got {self.n1}, {self.n2}, {self.n_max}")


@dataclass
class ContinuationConfig:
    """Exponential-multiplier settings. ``epsilon=None`` means (3/255)² d and
    ``beta0=None`` means the model's 1/γ²."""

    epsilon: float = None
    rho: float = 0.5
    beta0: float = None
    max_outer: int = 50
    min_factor: float = 0.5
    max_factor: float = 10.0

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.beta0 is not None and not self.beta0 > 0:
            raise ValueError("beta0 must be positive")


def default_epsilon(d, gray_levels=3.0):
    """Squared-error budget for an RMS error of ``gray_levels``/255 per pixel."""
    return (gray_levels / 255.0) ** 2 * d


@dataclass
class TraceRecord:
    iteration: int
    energy: float
    branch: int = 0
    beta: float = float("nan")
    residual: float = float("nan")
    grad_ok: bool = False
    stage: int = 0
    time: float = 0.0
    candidates: tuple = ()


@dataclass
class SolverTrace:
    """Per-iteration log of a solver run.

    ``energy`` is J1 for the joint solvers and the method's own objective for
    the baselines. ``branch`` is the candidate picked by the JPMAP ladder
    (0 for the starting point and for baselines). ``residual`` is
    ``||G(z) - x||² - epsilon`` (epsilon = 0 outside continuation).
    """

    method: str
    records: list = field(default_factory=list)
    x: np.ndarray = None
    z: np.ndarray = None
    iterations: int = 0
    wall_time: float = 0.0
    converged: bool = False
    grad_ok: bool = False
    message: str = ""
    extra: dict = field(default_factory=dict)

    def energies(self):
        return np.array([r.energy for r in self.records])

    def branches(self):
        return [r.branch for r in self.records]

    def monotone_violations(self, slack=1e-9):
        """Pairs of consecutive records in the same stage where energy rose."""
        bad = []
        for a, b in zip(self.records, self.records[1:]):
            if a.stage == b.stage and b.energy > a.energy + slack:
                bad.append((a.iteration, b.iteration, b.energy - a.energy))
        return bad

    def fingerprint(self):
        """Everything except timings, for reproducibility checks."""
        recs = tuple(
            (r.iteration, r.energy, r.branch, r.beta, r.residual, r.grad_ok, r.stage, r.candidates)
            for r in self.records
        )
        return (self.method, recs, self.x.tobytes(), self.z.tobytes(), self.iterations, self.converged)


class _Clock:
    def __init__(self):
        self.t0 = time.perf_counter()

    def __call__(self):
        return time.perf_counter() - self.t0


def _sqdist(a, b):
    r = a - b
    return float(r @ r)


# -- joint MAP ---------------------------------------------------------------


def jpmap_exact(ctx, x0=None, maxiter=200, tol=1e-12):
    """Alternate the encoder z-update and the exact x-update.

    Meant for models whose encoder gives the exact z-minimizer (linear VAEs);
    for other models J1 need not decrease. Stops when both iterates move by
    less than ``tol`` in sup norm.
    """
    clock = _Clock()
    trace = SolverTrace("jpmap-exact")
    x = ctx.aty.copy() if x0 is None else np.array(x0, dtype=np.float64)
    z = None
    beta = ctx.beta_value
    for n in range(maxiter):
        z_new = z_step_approx(ctx.model, x)
        mu = ctx.model.decode(z_new)
        x_new = x_step(ctx, z_new, mu=mu, x0=x)
        step = np.max(np.abs(x_new - x))
        if z is not None:
            step = max(step, np.max(np.abs(z_new - z)))
        x, z = x_new, z_new
        trace.records.append(
            TraceRecord(n + 1, j1(ctx, x, z, mu=mu), 1, beta, _sqdist(mu, x), time=clock())
        )
        if step < tol:
            trace.converged = True
            break
    trace.iterations = len(trace.records)
    return _finish(ctx, trace, x, z, clock)


def _finish(ctx, trace, x, z, clock, grad_tol=None):
    trace.x, trace.z = x, z
    grad_tol = GdConfig().grad_tol if grad_tol is None else grad_tol
    trace.grad_ok = float(np.max(np.abs(j1_grad_z(ctx, x, z)))) <= grad_tol
    trace.wall_time = clock()
    return x, z, trace


def jpmap_approx(ctx, x0=None, z0=None, maxiter=100, gd=None, energy_rel_tol=0.0, window=5):
    """Three-candidate alternation; each step keeps the lowest-J1 candidate.

    Candidates are the encoder mean, gradient descent started at the encoder
    mean, and gradient descent started at the current latent. The third
    candidate never increases J1, so neither does the iteration.
    """
    gd = GdConfig() if gd is None else gd
    clock = _Clock()
    trace = SolverTrace("jpmap-approx")
    x = ctx.aty.copy() if x0 is None else np.array(x0, dtype=np.float64)
    z = z_step_approx(ctx.model, x) if z0 is None else np.array(z0, dtype=np.float64)
    beta = ctx.beta_value
    mu = ctx.model.decode(z)
    e = j1(ctx, x, z, mu=mu)
    trace.records.append(TraceRecord(0, e, 0, beta, _sqdist(mu, x), time=clock()))
    for n in range(maxiter):
        z1 = z_step_approx(ctx.model, x)
        g2 = gd_refine_z(ctx, x, z1, gd)
        g3 = gd_refine_z(ctx, x, z, gd)
        cands = []
        for zi, ok in ((z1, False), (g2.z, g2.converged), (g3.z, g3.converged)):
            mu_i = ctx.model.decode(zi)
            xi = x_step(ctx, zi, mu=mu_i, x0=x)
            cands.append((j1(ctx, xi, zi, mu=mu_i), xi, zi, mu_i, ok))
        best = min(range(3), key=lambda i: cands[i][0])
        e, x, z, mu, ok = cands[best]
        trace.records.append(
            TraceRecord(n + 1, e, best + 1, beta, _sqdist(mu, x), ok, time=clock(),
                        candidates=tuple(c[0] for c in cands))
        )
        if _stalled(trace.records, energy_rel_tol, window):
            trace.converged = True
            break
    trace.iterations = len(trace.records) - 1
    return _finish(ctx, trace, x, z, clock, gd.grad_tol)


def _stalled(records, rel_tol, window):
    if rel_tol <= 0 or len(records) <= window:
        return False
    old, new = records[-1 - window].energy, records[-1].energy
    return abs(old - new) <= rel_tol * max(abs(new), 1e-300)


def jpmap_fast(ctx, x0=None, cfg=None, z0=None, epsilon=0.0, stage=0, trace=None):
    """Branch-ladder JPMAP: cheap candidates first, gradient descent last.

    For iterations ``n < n1`` the encoder mean alone is tried; for
    ``n < n2`` gradient descent from the encoder mean is tried next; the
    fallback is gradient descent from the current latent. A cheap candidate
    is only accepted when it strictly lowers J1, so J1 never increases.
    From ``n2`` on only the fallback runs.

    Parameters
    ----------
    ctx : EnergyCtx
    x0 : ndarray, optional
        Starting image, Aᵀy by default.
    cfg : JpmapConfig, optional
    z0 : ndarray, optional
        Starting latent, the encoder mean of ``x0`` by default.
    epsilon : float
        Only used to report the constraint residual in the trace.
    stage, trace :
        Used by the continuation drivers to append to a shared trace.

    Returns
    -------
    x_hat, z_hat, trace
    """
    cfg = JpmapConfig() if cfg is None else cfg
    clock = _Clock()
    own_trace = trace is None
    trace = SolverTrace("jpmap") if own_trace else trace
    x = ctx.aty.copy() if x0 is None else np.array(x0, dtype=np.float64)
    z = z_step_approx(ctx.model, x) if z0 is None else np.array(z0, dtype=np.float64)
    beta = ctx.beta_value
    mu = ctx.model.decode(z)
    e = j1(ctx, x, z, mu=mu)
    stage_start = len(trace.records)
    trace.records.append(TraceRecord(0, e, 0, beta, _sqdist(mu, x) - epsilon, stage=stage, time=clock()))
    stopped = False
    for n in range(cfg.n_max):
        taken = None
        z1 = None
        if n < cfg.n1:
            z1 = z_step_approx(ctx.model, x)
            mu1 = ctx.model.decode(z1)
            x1 = x_step(ctx, z1, mu=mu1, x0=x)
            e1 = j1(ctx, x1, z1, mu=mu1)
            if e1 < e:
                taken = (1, e1, x1, z1, mu1, False)
        if taken is None and n < cfg.n2:
            z1 = z_step_approx(ctx.model, x) if z1 is None else z1
            g = gd_refine_z(ctx, x, z1, cfg.gd)
            mu2 = ctx.model.decode(g.z)
            x2 = x_step(ctx, g.z, mu=mu2, x0=x)
            e2 = j1(ctx, x2, g.z, mu=mu2)
            if e2 < e:
                taken = (2, e2, x2, g.z, mu2, g.converged)
        if taken is None:
            g = gd_refine_z(ctx, x, z, cfg.gd)
            mu3 = ctx.model.decode(g.z)
            x3 = x_step(ctx, g.z, mu=mu3, x0=x)
            taken = (3, j1(ctx, x3, g.z, mu=mu3), x3, g.z, mu3, g.converged)
        branch, e, x, z, mu, ok = taken
        trace.records.append(
            TraceRecord(n + 1, e, branch, beta, _sqdist(mu, x) - epsilon, ok, stage, clock())
        )
        if _stalled(trace.records[stage_start:], cfg.energy_rel_tol, cfg.window):
            stopped = True
            break
    if own_trace:
        trace.iterations = len(trace.records) - 1
        trace.converged = stopped
        return _finish(ctx, trace, x, z, clock, cfg.gd.grad_tol)
    trace.extra.setdefault("inner_stopped", []).append(stopped)
    return x, z, trace


def jpmap_continuation(model, deg, x0=None, ccfg=None, jcfg=None):
    """Drive β upward with an exponential multiplier until
    ``||G(z) - x||² <= epsilon``.

    The first inner solve uses ``jcfg`` as given; later ones warm-start
    from the previous pair with ``n1 = n2 = 0``. β is multiplied by
    ``exp(rho * C / epsilon)`` clamped to ``[min_factor, max_factor]``,
    where ``C`` is the constraint violation. ``trace.converged`` is false
    when ``max_outer`` solves pass without meeting the constraint; the last
    iterate is still returned.
    """
    ccfg = ContinuationConfig() if ccfg is None else ccfg
    jcfg = JpmapConfig() if jcfg is None else jcfg
    clock = _Clock()
    eps = default_epsilon(model.data_dim) if ccfg.epsilon is None else ccfg.epsilon
    beta = 1.0 / model.gamma2 if ccfg.beta0 is None else ccfg.beta0
    trace = SolverTrace("jpmap-continuation", extra={"epsilon": eps, "betas": [], "violations": []})
    ctx = EnergyCtx(model, deg, beta)
    x, z, _ = jpmap_fast(ctx, x0, jcfg, epsilon=eps, stage=0, trace=trace)
    ladder_free = replace(jcfg, n1=0, n2=0)
    violation = math.inf
    for k in range(1, ccfg.max_outer + 1):
        ctx = EnergyCtx(model, deg, beta)
        x, z, _ = jpmap_fast(ctx, x, ladder_free, z0=z, epsilon=eps, stage=k, trace=trace)
        violation = _sqdist(model.decode(z), x) - eps
        trace.extra["betas"].append(beta)
        trace.extra["violations"].append(violation)
        if violation <= 0:
            trace.converged = True
            break
        factor = math.exp(min(ccfg.rho * violation / eps, 700.0))
        beta *= min(max(factor, ccfg.min_factor), ccfg.max_factor)
    trace.iterations = len(trace.records)
    trace.extra["outer_iterations"] = k if ccfg.max_outer else 0
    trace.extra["final_beta"] = ctx.beta_value
    trace.extra["constraint_residual"] = violation + eps
    if not trace.converged:
        trace.message = f"constraint not met after {ccfg.max_outer} outer iterations (violation {violation:.3g})"
    return _finish(ctx, trace, x, z, clock, jcfg.gd.grad_tol)


def default_beta_schedule(model, stages=5, ratio=10.0):
    beta0 = 1.0 / model.gamma2
    return [beta0 * ratio**k for k in range(stages)]


def mapz_splitting(model, deg, x0=None, betas=None, maxiter=60, gd=None):
    """Half-quadratic splitting on a fixed increasing β schedule.

    Each stage alternates gradient descent in z from the previous latent and
    the exact x-update, warm-started from the previous stage.
    """
    betas = default_beta_schedule(model) if betas is None else list(betas)
    if not betas:
        raise ValueError("empty beta schedule")
    cfg = JpmapConfig(0, 0, maxiter, GdConfig() if gd is None else gd, energy_rel_tol=0.0)
    clock = _Clock()
    trace = SolverTrace("splitting", extra={"betas": betas, "stage_residuals": []})
    x, z = x0, None
    for k, beta in enumerate(betas):
        ctx = EnergyCtx(model, deg, beta)
        x, z, _ = jpmap_fast(ctx, x, cfg, z0=z, stage=k, trace=trace)
        trace.extra["stage_residuals"].append(_sqdist(model.decode(z), x))
    trace.iterations = len(trace.records)
    trace.converged = True
    return _finish(ctx, trace, x, z, clock, cfg.gd.grad_tol)


# -- latent-space baselines --------------------------------------------------


def mapz_objective(model, deg, z):
    """F(G(z), y) + ||z||²/2, the negative log posterior of the latent."""
    z = np.asarray(z, dtype=np.float64)
    return data_term_f(deg, model.decode(z)) + 0.5 * float(z @ z)


def _data_fit_and_grad(model, deg, z):
    out, tape = model.decoder.forward(z)
    r = deg.op.apply(out) - deg.y
    s2 = deg.sigma**2
    _, g = model.decoder.backward(tape, deg.op.adjoint(r) / s2, param_grads=False)
    return float(r @ r) / (2 * s2), g


class _AdamZ:
    def __init__(self, lr):
        self.lr, self.t, self.m, self.v = lr, 0, 0.0, 0.0

    def step(self, z, g):
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * g
        self.v = 0.999 * self.v + 0.001 * g * g
        mhat = self.m / (1 - 0.9**self.t)
        vhat = self.v / (1 - 0.999**self.t)
        return z - self.lr * mhat / (np.sqrt(vhat) + 1e-8)


def csgm(model, deg, z0=None, iters=1000, rng=None, lr=0.01):
    """Adam on the latent negative log posterior from a random start.

    Returns the best iterate seen; ``x_hat`` is its decoding.
    """
    if z0 is None:
        rng = np.random.default_rng() if rng is None else rng
        z0 = rng.standard_normal(model.latent_dim)
    clock = _Clock()
    trace = SolverTrace("csgm")
    z = np.array(z0, dtype=np.float64)
    opt = _AdamZ(lr)
    best_z, best_e = z.copy(), math.inf
    for k in range(iters + 1):
        f, g = _data_fit_and_grad(model, deg, z)
        e = f + 0.5 * float(z @ z)
        trace.records.append(TraceRecord(k, e, time=clock()))
        if e < best_e:
            best_z, best_e = z.copy(), e
        if k < iters:
            z = opt.step(z, g + z)
    trace.iterations = iters
    trace.converged = True
    trace.extra["objective"] = best_e
    return _finish_latent(model, trace, best_z, clock)


def _finish_latent(model, trace, z, clock):
    x = model.decode(z)
    trace.x, trace.z = x, z
    trace.wall_time = clock()
    return x, z, trace


def mcsgm(model, deg, m=10, iters=1000, rng=None, lr=0.01):
    """CSGM with ``m`` random restarts; keeps the lowest objective."""
    if m < 1:
        raise ValueError("need at least one restart")
    rng = np.random.default_rng() if rng is None else rng
    clock = _Clock()
    runs = [csgm(model, deg, rng.standard_normal(model.latent_dim), iters, lr=lr) for _ in range(m)]
    objectives = [r[2].extra["objective"] for r in runs]
    best = int(np.argmin(objectives))
    x, z, trace = runs[best]
    trace.method = "mcsgm"
    trace.extra.update(restart_objectives=objectives, best_restart=best)
    trace.wall_time = clock()
    return x, z, trace


def pulse(model, deg, z0=None, iters=1000, rng=None, lr=0.01):
    """Adam on the data term with the latent kept on the sphere of radius √l."""
    radius = math.sqrt(model.latent_dim)
    if z0 is None:
        rng = np.random.default_rng() if rng is None else rng
        z0 = rng.standard_normal(model.latent_dim)
    z = np.array(z0, dtype=np.float64)
    norm = np.linalg.norm(z)
    if norm == 0.0:
        raise ValueError("cannot project the zero vector onto the sphere")
    z *= radius / norm
    clock = _Clock()
    trace = SolverTrace("pulse", extra={"radius": radius, "norms": []})
    opt = _AdamZ(lr)
    best_z, best_e = z.copy(), math.inf
    for k in range(iters + 1):
        f, g = _data_fit_and_grad(model, deg, z)
        trace.records.append(TraceRecord(k, f, time=clock()))
        trace.extra["norms"].append(float(np.linalg.norm(z)))
        if f < best_e:
            best_z, best_e = z.copy(), f
        if k < iters:
            z = opt.step(z, g)
            z *= radius / np.linalg.norm(z)
    trace.iterations = iters
    trace.converged = True
    trace.extra["objective"] = best_e
    return _finish_latent(model, trace, best_z, clock)


def project_to_range(model, w, z0, iters=200, lr=0.01, tol=1e-10):
    """Approximate argmin_z ||w - G(z)||² / 2 by Adam, best iterate kept."""
    z = np.array(z0, dtype=np.float64)
    opt = _AdamZ(lr)
    best_z, best_e = z.copy(), math.inf
    for _ in range(iters + 1):
        out, tape = model.decoder.forward(z)
        r = out - w
        e = 0.5 * float(r @ r)
        _, g = model.decoder.backward(tape, r, param_grads=False)
        if e < best_e:
            best_z, best_e = z.copy(), e
        if np.max(np.abs(g)) <= tol:
            break
        z = opt.step(z, g)
    return best_z, best_e


def pgd_gan(model, deg, x0=None, iters=100, eta=None, rng=None, inner_iters=200, inner_lr=0.01):
    """Projected gradient descent on the data fit onto the decoder range.

    ``eta`` defaults to 1/λ_max(AᵀA). The first projection starts from the
    encoder mean of the first gradient step; later ones warm-start from the
    previous latent.
    """
    op, y = deg.op, deg.y
    if eta is None:
        lam = normal_max_eigenvalue(op, 50)
        eta = 1.0 / lam if lam > 0 else 1.0
    clock = _Clock()
    trace = SolverTrace("pgdgan", extra={"eta": eta, "projection_residuals": []})
    x = deg.back_projection() if x0 is None else np.array(x0, dtype=np.float64)
    z = None
    for k in range(iters):
        w = x - eta * op.adjoint(op.apply(x) - y)
        if z is None:
            z = z_step_approx(model, w)
        z, res = project_to_range(model, w, z, inner_iters, inner_lr)
        x = model.decode(z)
        trace.extra["projection_residuals"].append(2.0 * res)
        trace.records.append(TraceRecord(k + 1, data_term_f(deg, x), time=clock()))
    trace.iterations = iters
    trace.converged = True
    if z is None:
        z = z_step_approx(model, x)
        x = model.decode(z)
    trace.x, trace.z, trace.wall_time = x, z, clock()
    return x, z, trace


def psnr(x, ref, peak=1.0):
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / mse))
