"""Joint energies over (image, latent) pairs and their partial minimizers.

With data term F(x) = ||Ax - y||² / (2σ²), decoder mean G and coupling
weight β (the inverse decoder variance):

    J1(x, z) = F(x) + H(x, z) + ||z||² / 2
    H(x, z)  = (d log(2π) + d log(1/β) + β ||x - G(z)||²) / 2

For β ≠ 1/γ² this is the half-quadratic splitting energy shifted by a
constant that does not depend on (x, z).
"""

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from jpmap.degradations import data_term_f, data_term_grad
from jpmap.linops import cg_solve

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class EnergyCtx:
    """A trained model, a degradation, and the coupling weight β.

    ``beta=None`` means the model's own value 1/γ².
    """

    model: object
    deg: object
    beta: float = None
    cg_tol: float = 1e-12

    def __post_init__(self):
        if self.beta is not None and not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.model.data_dim != self.deg.d:
            raise ValueError(
                f"model data_dim {self.model.data_dim} does not match degradation input size {self.deg.d}"
            )

    @property
    def beta_value(self):
        return 1.0 / self.model.gamma2 if self.beta is None else float(self.beta)

    def with_beta(self, beta):
        return EnergyCtx(self.model, self.deg, beta, self.cg_tol)

    @cached_property
    def aty(self):
        return self.deg.back_projection()

    def energy_floor(self):
        """Lower bound of J1: the constant part of H."""
        d = self.model.data_dim
        return 0.5 * d * (LOG_2PI - math.log(self.beta_value))


@dataclass
class GdConfig:
    lr: float = 0.01
    max_iters: int = 500
    grad_tol: float = 1e-5
    patience: int = 50

    def __post_init__(self):
        if self.lr <= 0 or self.max_iters < 0 or self.grad_tol <= 0 or self.patience < 1:
            raise ValueError(f"invalid gradient-descent settings: {self}")


@dataclass
class GdResult:
    z: np.ndarray
    energy: float
    grad_inf: float
    converged: bool
    iterations: int
    history: list = field(default_factory=list, repr=False)


def coupling_h(ctx, x, z, mu=None):
    mu = ctx.model.decode(z) if mu is None else mu
    beta = ctx.beta_value
    r = x - mu
    d = r.size
    return 0.5 * (d * LOG_2PI - d * math.log(beta) + beta * float(r @ r))


def j1(ctx, x, z, mu=None):
    z = np.asarray(z, dtype=np.float64)
    return data_term_f(ctx.deg, x) + coupling_h(ctx, x, z, mu) + 0.5 * float(z @ z)


def j1_grad_z(ctx, x, z):
    z = np.asarray(z, dtype=np.float64)
    mu = ctx.model.decode(z)
    _, g = ctx.model.decode_vjp(z, ctx.beta_value * (mu - x))
    return g + z


def _j1_and_grad_z(ctx, x, z, f_x=None):
    """One decoder pass for both the energy and its z-gradient."""
    beta = ctx.beta_value
    out, tape = ctx.model.decoder.forward(z)
    r = x - out
    _, g = ctx.model.decoder.backward(tape, -beta * r, param_grads=False)
    d = r.size
    h = 0.5 * (d * LOG_2PI - d * math.log(beta) + beta * float(r @ r))
    f_x = data_term_f(ctx.deg, x) if f_x is None else f_x
    return f_x + h + 0.5 * float(z @ z), g + z


def j1_grad_x(ctx, x, z, mu=None):
    mu = ctx.model.decode(z) if mu is None else mu
    return data_term_grad(ctx.deg, x) + ctx.beta_value * (x - mu)


def x_step(ctx, z, mu=None, x0=None):
    """Exact minimizer of J1(., z): (AᵀA + σ²β I)⁻¹ (Aᵀy + σ²β G(z)).

    Uses an elementwise formula when AᵀA is diagonal and conjugate gradient
    otherwise.
    """
    mu = ctx.model.decode(z) if mu is None else mu
    c = ctx.deg.sigma**2 * ctx.beta_value
    rhs = ctx.aty + c * mu
    diag = ctx.deg.op.normal_diagonal()
    if diag is not None:
        return rhs / (diag + c)
    op = ctx.deg.op
    return cg_solve(lambda u: op.adjoint(op.apply(u)) + c * u, rhs, tol=ctx.cg_tol, x0=mu if x0 is None else x0)


def z_step_approx(model, x):
    """Minimizer of J2(x, .), i.e. the encoder mean."""
    return model.encode(x)[0]


def coupling_k(model, x, z):
    """-log q(z | x) for the diagonal Gaussian encoder."""
    mu, var = model.encode(x)
    r = np.asarray(z) - mu
    return 0.5 * (mu.size * LOG_2PI + float(np.sum(np.log(var))) + float(np.sum(r * r / var)))


def j2(ctx, x, z):
    """J2 without its -log p(x) term, which does not depend on z."""
    return data_term_f(ctx.deg, x) + coupling_k(ctx.model, x, z)


def gd_refine_z(ctx, x, z0, cfg=None, record=False):
    """Adam descent on J1(x, .) from ``z0``, returning the best iterate seen.

    Since ``z0`` is itself a candidate, the returned energy never exceeds
    J1(x, z0). ``converged`` is set when the returned point has
    ``||grad||_inf <= cfg.grad_tol``; otherwise the budget ran out or the
    energy stopped improving for ``cfg.patience`` steps.
    """
    cfg = GdConfig() if cfg is None else cfg
    z = np.array(z0, dtype=np.float64)
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    b1, b2, eps = 0.9, 0.999, 1e-8
    f_x = data_term_f(ctx.deg, x)
    energy, grad = _j1_and_grad_z(ctx, x, z, f_x)
    best_z, best_e, best_g = z.copy(), energy, float(np.max(np.abs(grad)))
    history = [energy] if record else []
    stall = 0
    t = 0
    while best_g > cfg.grad_tol and t < cfg.max_iters and stall < cfg.patience:
        t += 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        z = z - cfg.lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        energy, grad = _j1_and_grad_z(ctx, x, z, f_x)
        if record:
            history.append(energy)
        if energy < best_e:
            best_z, best_e, best_g = z.copy(), energy, float(np.max(np.abs(grad)))
            stall = 0
        else:
            stall += 1
    return GdResult(best_z, best_e, best_g, best_g <= cfg.grad_tol, t, history)
