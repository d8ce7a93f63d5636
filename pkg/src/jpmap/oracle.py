"""Linear (probabilistic PCA) VAEs, where every quantity has a closed form.

Decoder ``p(x | z) = N(V z + v, γ² I)`` with prior ``z ~ N(0, I)``. The true
posterior is Gaussian with mean ``M Vᵀ (x - v)`` and covariance ``γ² M``,
``M = (VᵀV + γ² I)⁻¹``, so an encoder that outputs this mean makes the
encoder-based z-update exact.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from jpmap.linops import as_dense
from jpmap.neuralnet import Mlp
from jpmap.vae import VaeModel

DENSE_LIMIT = 200


@dataclass(frozen=True)
class LinearVae:
    V: np.ndarray
    v: np.ndarray
    gamma2: float

    def __post_init__(self):
        if self.V.ndim != 2 or self.v.shape != (self.V.shape[0],):
            raise ValueError("V must be (d, l) and v must have length d")
        if not self.gamma2 > 0:
            raise ValueError("gamma2 must be positive")

    @classmethod
    def random(cls, d, l, rng, gamma2=None, scale=1.0):
        V = scale * rng.standard_normal((d, l)) / np.sqrt(d)
        v = rng.uniform(0.2, 0.8, size=d)
        gamma2 = rng.uniform(0.01, 0.5) if gamma2 is None else gamma2
        return cls(V, v, float(gamma2))

    @property
    def d(self):
        return self.V.shape[0]

    @property
    def l(self):
        return self.V.shape[1]

    @cached_property
    def M(self):
        return np.linalg.inv(self.V.T @ self.V + self.gamma2 * np.eye(self.l))

    def decode(self, z):
        return np.asarray(z) @ self.V.T + self.v


def linear_posterior(lv, x):
    """Mean and covariance of p(z | x)."""
    mean = lv.M @ lv.V.T @ (np.asarray(x) - lv.v)
    return mean, lv.gamma2 * lv.M


def analytic_joint_map(lv, deg, beta=None):
    """Exact minimizer (x*, z*) of J1 for a linear decoder.

    Solves the (d + l) stationarity system densely:

        (AᵀA/σ² + βI) x - βV z       = Aᵀy/σ² + βv
        -βVᵀ x + (βVᵀV + I) z        = -βVᵀv
    """
    if lv.d > DENSE_LIMIT:
        raise ValueError(f"dense oracle limited to d <= {DENSE_LIMIT}")
    beta = 1.0 / lv.gamma2 if beta is None else beta
    d, l = lv.d, lv.l
    A = as_dense(deg.op)
    s2 = deg.sigma**2
    K = np.zeros((d + l, d + l))
    K[:d, :d] = A.T @ A / s2 + beta * np.eye(d)
    K[:d, d:] = -beta * lv.V
    K[d:, :d] = -beta * lv.V.T
    K[d:, d:] = beta * lv.V.T @ lv.V + np.eye(l)
    rhs = np.concatenate([A.T @ deg.y / s2 + beta * lv.v, -beta * lv.V.T @ lv.v])
    sol = np.linalg.solve(K, rhs)
    return sol[:d], sol[d:]


def build_exact_vae(lv, sigma_dvae=0.0):
    """Wrap ``lv`` as a :class:`VaeModel` whose encoder is the true posterior.

    Only the diagonal of the posterior covariance fits the diagonal encoder;
    the mean is exact.
    """
    gain = lv.M @ lv.V.T
    enc_w = np.vstack([gain, np.zeros((lv.l, lv.d))])
    enc_b = np.concatenate([-gain @ lv.v, np.log(np.diag(lv.gamma2 * lv.M))])
    encoder = Mlp([enc_w], [enc_b])
    decoder = Mlp([lv.V.copy()], [lv.v.copy()])
    return VaeModel(encoder, decoder, lv.gamma2, sigma_dvae)
