"""Forward models y = A x + noise and the Gaussian data-fit term."""

from dataclasses import dataclass, field

import numpy as np

from jpmap.linops import Convolution, Decimation, DenseMatrix, DiagonalMask, Identity, LinOp

MNIST_SHAPE = (28, 28)


@dataclass
class Degradation:
    """Linear operator, noise level (on the [0, 1] pixel scale) and observation."""

    op: LinOp
    sigma: float
    y: np.ndarray = None
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"noise level must be positive, got {self.sigma}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.float64)
            if self.y.shape != (self.op.out_dim,):
                raise ValueError(f"observation length {self.y.shape} != operator out_dim {self.op.out_dim}")

    @property
    def d(self):
        return self.op.in_dim

    def back_projection(self):
        """Aᵀy, the default starting image."""
        return self.op.adjoint(self._observed())

    def _observed(self):
        if self.y is None:
            raise ValueError("degradation has no observation; call degrade() first or pass y")
        return self.y


def _image_shape(d, shape):
    if shape is not None:
        return tuple(shape)
    side = int(round(np.sqrt(d)))
    if side * side != d:
        raise ValueError(f"cannot infer a square image shape for d={d}; pass shape=")
    return (side, side)


def make_denoising(d, sigma):
    return Degradation(Identity(d), sigma, kind="denoise")


def make_compressed_sensing(q, d, sigma, seed):
    """Gaussian sensing matrix with i.i.d. N(0, 1/q) entries."""
    if not 1 <= q:
        raise ValueError("need at least one measurement")
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((q, d)) / np.sqrt(q)
    return Degradation(DenseMatrix(mat), sigma, kind="cs", params={"q": q, "seed": seed})


def make_interpolation(p, d, sigma, seed):
    """Hide exactly ``d - round((1-p) d)`` pixels chosen uniformly at random."""
    if not 0 <= p < 1:
        raise ValueError(f"missing fraction must satisfy 0 <= p < 1, got {p}")
    rng = np.random.default_rng(seed)
    n_keep = int(round((1.0 - p) * d))
    keep = np.zeros(d, dtype=bool)
    keep[rng.choice(d, size=n_keep, replace=False)] = True
    return Degradation(DiagonalMask(keep), sigma, kind="interp", params={"p": p, "seed": seed})


def uniform_kernel(size=3):
    return np.full((size, size), 1.0 / (size * size))


def make_deblur(kernel, d, sigma, shape=None):
    op = Convolution(kernel, _image_shape(d, shape))
    return Degradation(op, sigma, kind="deblur", params={"kernel": np.asarray(kernel).tolist()})


def make_superres(s, d, sigma, shape=None):
    op = Decimation(s, _image_shape(d, shape))
    return Degradation(op, sigma, kind="sr", params={"s": s})


def degrade(deg, x, rng):
    """Draw ``y = A x + sigma * noise``, store it on ``deg`` and return it."""
    clean = deg.op.apply(x)
    deg.y = clean + deg.sigma * rng.standard_normal(clean.shape)
    return deg.y


def data_term_f(deg, x):
    r = deg.op.apply(x) - deg._observed()
    return float(r @ r) / (2.0 * deg.sigma**2)


def data_term_grad(deg, x):
    r = deg.op.apply(x) - deg._observed()
    return deg.op.adjoint(r) / deg.sigma**2
