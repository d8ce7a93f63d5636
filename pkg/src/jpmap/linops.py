"""Linear operators with adjoints, and a conjugate-gradient solver.

All operators act on flat float64 vectors. Image-shaped operators
(convolution, decimation) carry the ``(height, width)`` of the image they
act on and reshape internally in row-major order.
"""

import numpy as np


class DimensionError(ValueError):
    pass


class CGError(RuntimeError):
    """Conjugate gradient did not reach the requested tolerance."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class LinOp:
    """Base class. Subclasses implement ``_apply`` and ``_adjoint``."""

    in_dim: int
    out_dim: int

    def apply(self, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.in_dim,):
            raise DimensionError(
                f"{type(self).__name__} expects input of length {self.in_dim}, got shape {u.shape}"
            )
        return self._apply(u)

    def adjoint(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.out_dim,):
            raise DimensionError(
                f"{type(self).__name__} adjoint expects input of length {self.out_dim}, got shape {v.shape}"
            )
        return self._adjoint(v)

    def normal_diagonal(self):
        """Diagonal of AᵀA when AᵀA is diagonal, else None."""
        return None

    def __repr__(self):
        return f"{type(self).__name__}(in_dim={self.in_dim}, out_dim={self.out_dim})"


class Identity(LinOp):
    def __init__(self, d):
        self.in_dim = self.out_dim = int(d)

    def _apply(self, u):
        return u.copy()

    def _adjoint(self, v):
        return v.copy()

    def normal_diagonal(self):
        return np.ones(self.in_dim)


class DiagonalMask(LinOp):
    """Keeps the entries flagged in ``keep`` and zeroes the rest (m = d)."""

    def __init__(self, keep):
        self.keep = np.asarray(keep).astype(bool)
        self.keep.setflags(write=False)
        self.in_dim = self.out_dim = self.keep.size
        self._w = self.keep.astype(np.float64)

    def _apply(self, u):
        return u * self._w

    def _adjoint(self, v):
        return v * self._w

    def normal_diagonal(self):
        return self._w.copy()


class DenseMatrix(LinOp):
    def __init__(self, matrix):
        self.matrix = np.array(matrix, dtype=np.float64, ndmin=2)
        self.matrix.setflags(write=False)
        self.out_dim, self.in_dim = self.matrix.shape

    def _apply(self, u):
        return self.matrix @ u

    def _adjoint(self, v):
        return self.matrix.T @ v


def _shifted(img, di, dj):
    """out[i, j] = img[i - di, j - dj], zero outside the image."""
    h, w = img.shape
    out = np.zeros_like(img)
    if abs(di) >= h or abs(dj) >= w:
        return out
    src_i = slice(max(0, -di), h - max(0, di))
    dst_i = slice(max(0, di), h - max(0, -di))
    src_j = slice(max(0, -dj), w - max(0, dj))
    dst_j = slice(max(0, dj), w - max(0, -dj))
    out[dst_i, dst_j] = img[src_i, src_j]
    return out


class Convolution(LinOp):
    """Same-size 2-D convolution ``h * x`` with zero padding.

    The kernel must have odd side lengths so that its center is a pixel.
    """

    def __init__(self, kernel, shape):
        kernel = np.array(kernel, dtype=np.float64, ndmin=2)
        if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
            raise ValueError(f"kernel must be 2-D with odd sides, got shape {kernel.shape}")
        self.kernel = kernel
        self.kernel.setflags(write=False)
        self.shape = (int(shape[0]), int(shape[1]))
        self.in_dim = self.out_dim = self.shape[0] * self.shape[1]
        ci, cj = kernel.shape[0] // 2, kernel.shape[1] // 2
        self._taps = [
            (kernel[a, b], a - ci, b - cj)
            for a in range(kernel.shape[0])
            for b in range(kernel.shape[1])
            if kernel[a, b] != 0.0
        ]

    def _apply(self, u):
        img = u.reshape(self.shape)
        out = np.zeros(self.shape)
        for c, di, dj in self._taps:
            out += c * _shifted(img, di, dj)
        return out.ravel()

    def _adjoint(self, v):
        img = v.reshape(self.shape)
        out = np.zeros(self.shape)
        for c, di, dj in self._taps:
            out += c * _shifted(img, -di, -dj)
        return out.ravel()


class Decimation(LinOp):
    """Average over non-overlapping s×s blocks, then keep one value per block."""

    def __init__(self, factor, shape):
        s = int(factor)
        h, w = int(shape[0]), int(shape[1])
        if s < 1 or h % s or w % s:
            raise ValueError(f"factor {factor} must be >= 1 and divide image shape {shape}")
        self.factor = s
        self.shape = (h, w)
        self.in_dim = h * w
        self.out_dim = (h // s) * (w // s)

    def _apply(self, u):
        s = self.factor
        h, w = self.shape
        return u.reshape(h // s, s, w // s, s).mean(axis=(1, 3)).ravel()

    def _adjoint(self, v):
        s = self.factor
        h, w = self.shape
        small = v.reshape(h // s, w // s) / (s * s)
        return np.repeat(np.repeat(small, s, axis=0), s, axis=1).ravel()

    def normal_diagonal(self):
        if self.factor == 1:
            return np.ones(self.in_dim)
        return None


def apply(op, u):
    return op.apply(u)


def adjoint_apply(op, v):
    return op.adjoint(v)


def as_dense(op):
    """Materialize ``op`` as an (out_dim, in_dim) matrix, column by column."""
    cols = np.empty((op.out_dim, op.in_dim))
    e = np.zeros(op.in_dim)
    for j in range(op.in_dim):
        e[j] = 1.0
        cols[:, j] = op.apply(e)
        e[j] = 0.0
    return cols


def normal_max_eigenvalue(op, iters=50, seed=0):
    """Power-iteration estimate of the largest eigenvalue of AᵀA."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(op.in_dim)
    u /= np.linalg.norm(u)
    lam = 0.0
    for _ in range(iters):
        w = op.adjoint(op.apply(u))
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        u = w / lam
    return lam


def cg_solve(mat_apply, b, tol=1e-10, maxiter=None, x0=None):
    """Solve ``M x = b`` for symmetric positive definite ``M``.

    Parameters
    ----------
    mat_apply : callable
        Maps a vector ``u`` to ``M u``.
    b : ndarray
        Right-hand side.
    tol : float
        Relative residual target, ``||M x - b|| <= tol * ||b||``.
    maxiter : int, optional
        Iteration cap, defaults to ``10 * len(b)``.
    x0 : ndarray, optional
        Starting point (zeros by default).

    Raises
    ------
    CGError
        If the target is not met within ``maxiter`` iterations. The final
        relative residual is attached as ``.residual``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    maxiter = 10 * n if maxiter is None else maxiter
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    target = tol * bnorm
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    used = 0
    # restart from the true residual whenever the recurrence claims convergence
    while True:
        r = b - mat_apply(x)
        rs = r @ r
        if np.sqrt(rs) <= target:
            return x
        if used >= maxiter:
            res = np.sqrt(rs) / bnorm
            raise CGError(f"CG did not converge: relative residual {res:.3e} > {tol:.1e}", res)
        p = r.copy()
        while used < maxiter and np.sqrt(rs) > target:
            mp = mat_apply(p)
            curv = p @ mp
            if curv <= 0:
                raise CGError("operator is not positive definite", np.sqrt(rs) / bnorm)
            alpha = rs / curv
            x += alpha * p
            r -= alpha * mp
            rs_new = r @ r
            p = r + (rs_new / rs) * p
            rs = rs_new
            used += 1
