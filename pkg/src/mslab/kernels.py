"""Gaussian kernel, bandwidth matrices, and kernel derivative machinery.

Everything here is specific to the Gaussian kernel K(x) =
(2*pi)^(-d/2) exp(-x'x / 2).  Bandwidth rescaling follows the convention
K_H(x) = |H|^(-1/2) K(H^(-1/2) x), so K_H is exactly the N(0, H) density.
"""

from __future__ import annotations

import enum
import math
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ValidationError

__all__ = [
    "MatrixClass",
    "BandwidthMatrix",
    "profile_k",
    "profile_g",
    "mahalanobis",
    "rescaled_kernel",
    "kernel_laplacian",
    "gaussian_derivative_tensor",
    "gaussian_derivative_sum",
    "grad_kernel_constant",
]

MAX_DERIVATIVE_ORDER = 6


class MatrixClass(enum.Enum):
    """Constraint class of a bandwidth matrix."""

    UNCONSTRAINED = "unconstrained"
    DIAGONAL = "diagonal"
    SCALAR = "scalar"


def _exact_symmetrize(a: np.ndarray) -> np.ndarray:
    # Mirror the lower triangle so H == H.T holds bitwise, not just within
    # rounding of (A + A.T) / 2.
    lower = np.tril(a)
    return lower + np.tril(a, -1).T


class BandwidthMatrix:
    """A symmetric positive definite bandwidth matrix.

    Parameters
    ----------
    matrix : array_like, shape (d, d)
        Symmetric positive definite matrix.  The lower triangle is the
        stored representation; the upper triangle must agree with it to a
        small relative tolerance and is discarded.
    matrix_class : MatrixClass, optional
        Declared constraint class.  If omitted, the most specific class
        consistent with the entries is detected (exact zero off-diagonals
        give DIAGONAL, equal diagonal additionally gives SCALAR).

    Raises
    ------
    ValidationError
        If the matrix is not square, not finite, materially asymmetric,
        not positive definite, or inconsistent with the declared class.
    """

    def __init__(self, matrix, matrix_class: MatrixClass | None = None):
        a = np.asarray(matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError(f"bandwidth matrix must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValidationError(f"bandwidth matrix has non-finite entries: {a!r}")
        scale = np.max(np.abs(a))
        if scale == 0.0:
            raise ValidationError(f"bandwidth matrix is zero: {a!r}")
        if np.max(np.abs(a - a.T)) > 1e-8 * scale:
            raise ValidationError(f"bandwidth matrix is not symmetric: {a!r}")
        h = _exact_symmetrize(a)
        try:
            chol = np.linalg.cholesky(h)
        except np.linalg.LinAlgError:
            raise ValidationError(f"bandwidth matrix is not positive definite: {h!r}") from None

        detected = MatrixClass.UNCONSTRAINED
        offdiag_zero = np.all(h[~np.eye(h.shape[0], dtype=bool)] == 0.0)
        if offdiag_zero:
            detected = MatrixClass.DIAGONAL
            if np.all(h.diagonal() == h[0, 0]):
                detected = MatrixClass.SCALAR
        if matrix_class is not None:
            if matrix_class is MatrixClass.DIAGONAL and not offdiag_zero:
                raise ValidationError(f"declared diagonal but off-diagonals are nonzero: {h!r}")
            if matrix_class is MatrixClass.SCALAR and detected is not MatrixClass.SCALAR:
                raise ValidationError(f"declared scalar but not of the form h^2 I: {h!r}")
            self._class = matrix_class
        else:
            self._class = detected

        self._matrix = h
        self._matrix.setflags(write=False)
        self._chol = chol
        self._chol_inv = solve_triangular(chol, np.eye(h.shape[0]), lower=True)
        self._inverse = self._chol_inv.T @ self._chol_inv
        self._log_det = 2.0 * np.sum(np.log(chol.diagonal()))

    @classmethod
    def diagonal(cls, variances) -> "BandwidthMatrix":
        v = np.asarray(variances, dtype=float)
        if v.ndim != 1:
            raise ValidationError(f"diagonal variances must be a vector, got shape {v.shape}")
        return cls(np.diag(v), MatrixClass.DIAGONAL)

    @classmethod
    def scalar(cls, h_squared: float, dim: int) -> "BandwidthMatrix":
        return cls(float(h_squared) * np.eye(dim), MatrixClass.SCALAR)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def dim(self) -> int:
        return self._matrix.shape[0]

    @property
    def matrix_class(self) -> MatrixClass:
        return self._class

    @property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor L with H = L L'."""
        return self._chol

    @property
    def chol_inv(self) -> np.ndarray:
        """L^(-1); whitening is x -> x @ chol_inv.T."""
        return self._chol_inv

    @property
    def inverse(self) -> np.ndarray:
        return self._inverse

    @property
    def log_det(self) -> float:
        return self._log_det

    @property
    def det(self) -> float:
        return float(np.exp(self._log_det))

    def whiten(self, points: np.ndarray) -> np.ndarray:
        """Map points so squared Euclidean norms become M_H distances to 0."""
        return np.asarray(points, dtype=float) @ self._chol_inv.T

    def __repr__(self) -> str:
        return f"BandwidthMatrix({self._matrix.tolist()}, {self._class.value})"


def profile_k(u, dim: int):
    """Profile k of the Gaussian kernel, K(x) = k(x'x) / 2."""
    return 2.0 * (2.0 * np.pi) ** (-dim / 2.0) * np.exp(-np.asarray(u, dtype=float) / 2.0)


def profile_g(u, dim: int):
    """Weight g = -k'; nonnegative, so mean shift weights are convex."""
    return (2.0 * np.pi) ** (-dim / 2.0) * np.exp(-np.asarray(u, dtype=float) / 2.0)


def _as_points(x, dim: int) -> np.ndarray:
    p = np.asarray(x, dtype=float)
    if p.shape == () or p.shape[-1] != dim:
        raise ValidationError(f"point has dimension {p.shape}, bandwidth has dim {dim}")
    return p


def mahalanobis(x, y, H: BandwidthMatrix):
    """Squared Mahalanobis distance (x - y)' H^(-1) (x - y).

    Broadcasts over leading axes of x and y; the trailing axis is the
    coordinate axis.
    """
    d = H.dim
    diff = _as_points(x, d) - _as_points(y, d)
    z = diff @ H.chol_inv.T
    return np.sum(z * z, axis=-1)


def rescaled_kernel(x, H: BandwidthMatrix):
    """Rescaled Gaussian kernel K_H(x) = |H|^(-1/2) K(H^(-1/2) x).

    Equals the N(0, H) density at x.  Broadcasts over leading axes.
    """
    d = H.dim
    m = mahalanobis(x, np.zeros(d), H)
    log_norm = -0.5 * (d * np.log(2.0 * np.pi) + H.log_det)
    return np.exp(log_norm - 0.5 * m)


def kernel_laplacian(x, sigma: BandwidthMatrix):
    """Laplacian of the rescaled kernel, sum of second partials of K_Sigma.

    Closed form for the Gaussian: K_Sigma(x) (||Sigma^(-1) x||^2
    - tr(Sigma^(-1))).  Broadcasts over leading axes of x.
    """
    d = sigma.dim
    p = _as_points(x, d)
    u = p @ sigma.inverse  # Sigma^(-1) x, inverse is symmetric
    quad = np.sum(u * u, axis=-1)
    return rescaled_kernel(p, sigma) * (quad - np.trace(sigma.inverse))


def _hermite_batch(u: np.ndarray, sinv: np.ndarray, order: int) -> np.ndarray:
    """Order-r Hermite-type tensor h_r for a batch of points.

    u is Sigma^(-1) x with shape (m, d).  Returns shape (m, d**order) where
    the flat entry index read in base d is the differentiation coordinate
    sequence (most significant digit = outermost derivative).  Defined by
    h_0 = 1, h_1 = u and

        h_{r+1}[i, J] = u_i h_r[J] - sum_p Sigma^(-1)[i, j_p] h_{r-1}[J \\ p]

    which gives D^r K_Sigma(x) = (-1)^r K_Sigma(x) h_r(x).
    """
    m, d = u.shape
    prev2 = np.ones((m, 1))
    if order == 0:
        return prev2
    prev = u.astype(float, copy=True)
    if order == 1:
        return prev
    for r in range(1, order):
        nxt = np.empty((m, d ** (r + 1)))
        for i in range(d):
            for t in range(d**r):
                digits = [(t // d ** (r - 1 - p)) % d for p in range(r)]
                acc = u[:, i] * prev[:, t]
                for p in range(r):
                    rem = 0
                    for q in range(r):
                        if q != p:
                            rem = rem * d + digits[q]
                    acc = acc - sinv[i, digits[p]] * prev2[:, rem]
                nxt[:, i * d**r + t] = acc
        prev2 = prev
        prev = nxt
    return prev


def gaussian_derivative_tensor(x, sigma: BandwidthMatrix, order: int) -> np.ndarray:
    """Flattened derivative tensor D^(kron r) K_Sigma(x) of length d**order.

    Entry index read in base d gives the sequence of differentiation
    coordinates; the tensor is symmetric under index permutation because
    partial derivatives commute.  Orders 0 through 6 are supported.
    """
    if not 0 <= order <= MAX_DERIVATIVE_ORDER:
        raise ValidationError(f"derivative order must be in [0, {MAX_DERIVATIVE_ORDER}], got {order}")
    d = sigma.dim
    p = _as_points(x, d)
    if p.ndim != 1:
        raise ValidationError("gaussian_derivative_tensor takes a single point")
    u = (p @ sigma.inverse)[None, :]
    h = _hermite_batch(u, sigma.inverse, order)[0]
    return (-1.0) ** order * rescaled_kernel(p, sigma) * h


def gaussian_derivative_sum(
    x, sigma: BandwidthMatrix, order: int, chunk: int = 32768
) -> np.ndarray:
    """Sum over rows of D^(kron r) K_Sigma, as a length-d**order vector.

    Processes the batch in chunks to bound memory (order 6 holds d**6
    columns per row) and compensates the cross-chunk accumulation.
    """
    if not 0 <= order <= MAX_DERIVATIVE_ORDER:
        raise ValidationError(
            f"derivative order must be in [0, {MAX_DERIVATIVE_ORDER}], got {order}"
        )
    d = sigma.dim
    p = _as_points(x, d)
    if p.ndim == 1:
        p = p[None, :]
    partials = []
    for start in range(0, p.shape[0], chunk):
        block = p[start : start + chunk]
        u = block @ sigma.inverse
        h = _hermite_batch(u, sigma.inverse, order)
        partials.append(rescaled_kernel(block, sigma) @ h)
    if len(partials) == 1:
        total = partials[0]
    else:
        total = np.array([math.fsum(col) for col in zip(*partials)])
    return (-1.0) ** order * total


@lru_cache(maxsize=None)
def grad_kernel_constant(dim: int) -> np.ndarray:
    """R(DK) = integral of DK DK' for the standard Gaussian kernel.

    Spherical symmetry makes it a multiple of the identity; the Gaussian
    closed form is (1/2) (4 pi)^(-d/2) I_d.
    """
    if dim < 1:
        raise ValidationError(f"dimension must be positive, got {dim}")
    c = 0.5 * (4.0 * np.pi) ** (-dim / 2.0)
    out = c * np.eye(dim)
    out.setflags(write=False)
    return out
