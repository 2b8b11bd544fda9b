"""Bandwidth selectors for density-gradient estimation.

Ten selectors: the closed-form normal-scale (ns) and Abramson-style
diagonal shrinkage (at), and cross-validation (cv), plug-in (pi),
smoothed cross-validation (scv), and the implicit equation (it), each
over the unconstrained SPD class (suffix u) or the positive diagonal
class (suffix d).

The criteria are exact O(n^2) pairwise sums of Gaussian kernel
derivatives.  cv/pi/scv are minimized, it is solved for a root, all by a
derivative-free simplex search over an unconstrained parametrization of
the matrix class (log-diagonal Cholesky factors, or log variances for
the diagonal class), started at the normal-scale bandwidth with one
restart pass.

pi, scv, and it need a pilot bandwidth G.  The default pilot is the
normal-scale rule for density estimation, G = (4/(d+2))^{2/(d+4)}
n^{-2/(d+4)} S; a fixed G can be supplied instead and is echoed in the
result.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import brentq, minimize

from .errors import ValidationError
from .kernels import (
    BandwidthMatrix,
    MatrixClass,
    gaussian_derivative_sum,
    grad_kernel_constant,
    kernel_laplacian,
)

__all__ = [
    "SELECTOR_NAMES",
    "SelectorSpec",
    "SelectionResult",
    "SelectorWorkspace",
    "ns_bandwidth",
    "at_bandwidth",
    "normal_scale_pilot",
    "cv_criterion",
    "pi_criterion",
    "scv_criterion",
    "it_residual",
    "parse_selector",
    "select",
]

SELECTOR_NAMES = ("ns", "at", "cvu", "cvd", "piu", "pid", "scvu", "scvd", "itu", "itd")

_PAIR_BLOCK_ROWS = 131072  # pairwise-difference rows per block (memory cap)
_DIFFS_CACHE_LIMIT = 2000  # cache the full difference array up to this n


def _as_data(data) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValidationError(
            f"data must be a 2-d array with at least 2 rows, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError("data contains non-finite values")
    return arr


def _sample_cov(data: np.ndarray) -> np.ndarray:
    n, d = data.shape
    if n < d + 1:
        raise ValidationError(f"need n >= d + 1 = {d + 1} rows, got {n}")
    return np.cov(data.T).reshape(d, d)


def ns_bandwidth(data) -> BandwidthMatrix:
    """Normal-scale bandwidth for gradient estimation: c(d, n) S.

    c(d, n) = (4/(d+4))^{2/(d+6)} n^{-2/(d+6)}.
    """
    arr = _as_data(data)
    n, d = arr.shape
    c = (4.0 / (d + 4.0)) ** (2.0 / (d + 6.0)) * float(n) ** (-2.0 / (d + 6.0))
    try:
        return BandwidthMatrix(c * _sample_cov(arr))
    except ValidationError as exc:
        raise ValidationError(f"singular sample covariance: {exc}") from None


def at_bandwidth(data) -> BandwidthMatrix:
    """Diagonal normal-scale density bandwidth shrunk by the factor 3/4.

    h_i = (3/4) (4/(d+2))^{1/(d+4)} n^{-1/(d+4)} s_i.
    """
    arr = _as_data(data)
    n, d = arr.shape
    s = np.std(arr, axis=0, ddof=1)
    if np.any(s <= 0.0):
        raise ValidationError("zero variance in some coordinate")
    h = 0.75 * (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * float(n) ** (-1.0 / (d + 4.0)) * s
    return BandwidthMatrix.diagonal(h**2)


def normal_scale_pilot(data) -> BandwidthMatrix:
    """Normal-scale bandwidth for density estimation, the default pilot G."""
    arr = _as_data(data)
    n, d = arr.shape
    c = (4.0 / (d + 2.0)) ** (2.0 / (d + 4.0)) * float(n) ** (-2.0 / (d + 4.0))
    return BandwidthMatrix(c * _sample_cov(arr))


def _as_bandwidth(H, d: int) -> BandwidthMatrix:
    bw = H if isinstance(H, BandwidthMatrix) else BandwidthMatrix(H)
    if bw.dim != d:
        raise ValidationError(f"bandwidth dimension {bw.dim} does not match data {d}")
    return bw


class SelectorWorkspace:
    """Per-dataset caches for the O(n^2) criterion sums.

    Pairwise differences are cached outright for small n and streamed in
    row blocks otherwise; the pilot-only pieces (the order-6 derivative
    sum and the 2G Laplacian sum) are cached per pilot matrix since they
    do not depend on H.
    """

    def __init__(self, data):
        self.data = _as_data(data)
        self.n, self.d = self.data.shape
        self._diffs = None
        if self.n <= _DIFFS_CACHE_LIMIT:
            self._diffs = (self.data[:, None, :] - self.data[None, :, :]).reshape(
                -1, self.d
            )
        self._psi6: dict[bytes, np.ndarray] = {}
        self._lap_2g: dict[bytes, float] = {}

    def _pair_blocks(self):
        if self._diffs is not None:
            for start in range(0, self._diffs.shape[0], _PAIR_BLOCK_ROWS):
                yield self._diffs[start : start + _PAIR_BLOCK_ROWS]
            return
        rows = max(1, _PAIR_BLOCK_ROWS // self.n)
        for start in range(0, self.n, rows):
            block = self.data[start : start + rows, None, :] - self.data[None, :, :]
            yield block.reshape(-1, self.d)

    def lap_sum(self, sigma) -> float:
        """Sum of the kernel Laplacian at scale sigma over all (i, j) pairs."""
        mat = sigma.matrix if isinstance(sigma, BandwidthMatrix) else np.asarray(sigma)
        L = np.linalg.cholesky(mat)
        lin = solve_triangular(L, np.eye(self.d), lower=True)
        norm = (2.0 * np.pi) ** (-self.d / 2.0) / float(np.prod(np.diag(L)))
        trace = float(np.sum(lin * lin))  # tr(Sigma^-1) via the factor
        parts = []
        for block in self._pair_blocks():
            w = block @ lin.T
            m = np.einsum("ij,ij->i", w, w)
            v = w @ lin
            q = np.einsum("ij,ij->i", v, v)
            np.exp(-0.5 * m, out=m)
            q -= trace
            parts.append(float(m @ q))
        return norm * math.fsum(parts)

    def psi6(self, pilot: BandwidthMatrix) -> np.ndarray:
        """n^{-2} sum_{i,j} D^{kron 6} K_G(X_i - X_j), cached per pilot."""
        key = pilot.matrix.tobytes()
        if key not in self._psi6:
            parts = [gaussian_derivative_sum(b, pilot, 6) for b in self._pair_blocks()]
            total = parts[0] if len(parts) == 1 else np.sum(np.stack(parts), axis=0)
            self._psi6[key] = total / self.n**2
        return self._psi6[key]

    def lap_2g(self, pilot: BandwidthMatrix) -> float:
        key = pilot.matrix.tobytes()
        if key not in self._lap_2g:
            self._lap_2g[key] = self.lap_sum(2.0 * pilot.matrix)
        return self._lap_2g[key]

    # criterion evaluators ------------------------------------------------

    def cv(self, H: BandwidthMatrix) -> float:
        n = self.n
        lap_2h = self.lap_sum(2.0 * H.matrix)
        lap_h_off = self.lap_sum(H) - n * float(
            kernel_laplacian(np.zeros(self.d), H)
        )
        return -lap_2h / n**2 + 2.0 * lap_h_off / (n * (n - 1))

    def _first_term(self, H: BandwidthMatrix) -> float:
        r_const = float(grad_kernel_constant(self.d)[0, 0])
        return (
            r_const
            * float(np.trace(H.inverse))
            * np.exp(-0.5 * H.log_det)
            / self.n
        )

    def pi(self, H: BandwidthMatrix, pilot: BandwidthMatrix) -> float:
        d = self.d
        psi = self.psi6(pilot).reshape(d * d, d * d, d * d)
        vec_i = np.eye(d).reshape(-1)
        vec_h = H.matrix.reshape(-1)  # symmetric, so row/column stacking agree
        contraction = float(vec_i @ (psi @ vec_h) @ vec_h)
        return self._first_term(H) - 0.25 * contraction

    def _scv_bracket(self, H: BandwidthMatrix, pilot: BandwidthMatrix) -> float:
        g2 = 2.0 * pilot.matrix
        inner = (
            self.lap_sum(2.0 * H.matrix + g2)
            - 2.0 * self.lap_sum(H.matrix + g2)
            + self.lap_2g(pilot)
        )
        return inner / self.n**2

    def scv(self, H: BandwidthMatrix, pilot: BandwidthMatrix) -> float:
        return self._first_term(H) - self._scv_bracket(H, pilot)

    def it(self, H: BandwidthMatrix, pilot: BandwidthMatrix) -> float:
        return (self.d + 2.0) * self._first_term(H) + 4.0 * self._scv_bracket(H, pilot)


def cv_criterion(H, data) -> float:
    ws = data if isinstance(data, SelectorWorkspace) else SelectorWorkspace(data)
    return ws.cv(_as_bandwidth(H, ws.d))


def pi_criterion(H, data, pilot) -> float:
    ws = data if isinstance(data, SelectorWorkspace) else SelectorWorkspace(data)
    return ws.pi(_as_bandwidth(H, ws.d), _as_bandwidth(pilot, ws.d))


def scv_criterion(H, data, pilot) -> float:
    ws = data if isinstance(data, SelectorWorkspace) else SelectorWorkspace(data)
    return ws.scv(_as_bandwidth(H, ws.d), _as_bandwidth(pilot, ws.d))


def it_residual(H, data, pilot) -> float:
    ws = data if isinstance(data, SelectorWorkspace) else SelectorWorkspace(data)
    return ws.it(_as_bandwidth(H, ws.d), _as_bandwidth(pilot, ws.d))


# ---------------------------------------------------------------------------
# the optimizing selectors


@dataclasses.dataclass(frozen=True)
class SelectorSpec:
    """One of the ten selectors plus optimizer/pilot settings."""

    method: str  # ns | at | cv | pi | scv | it
    matrix_class: MatrixClass = MatrixClass.UNCONSTRAINED
    pilot: object = "normal-scale"  # or a fixed SPD matrix / BandwidthMatrix
    x_tol: float = 1e-3  # simplex spread on the log-scale parameters
    f_tol: float = 1e-5  # criterion spread relative to the start value
    max_evals: int = 200  # per simplex run; a restart doubles the budget
    it_rtol: float = 1e-6  # root acceptance relative to the first term

    def __post_init__(self):
        if self.method not in ("ns", "at", "cv", "pi", "scv", "it"):
            raise ValidationError(f"unknown selector method {self.method!r}")
        if self.method == "at" and self.matrix_class is MatrixClass.UNCONSTRAINED:
            object.__setattr__(self, "matrix_class", MatrixClass.DIAGONAL)
        if self.max_evals < 10:
            raise ValidationError("max_evals must be at least 10")

    @property
    def name(self) -> str:
        if self.method in ("ns", "at"):
            return self.method
        suffix = "d" if self.matrix_class is MatrixClass.DIAGONAL else "u"
        return self.method + suffix

    @property
    def needs_pilot(self) -> bool:
        return self.method in ("pi", "scv", "it")


def parse_selector(name: str) -> SelectorSpec:
    """Map a selector name (ns, at, cvu, ..., itd) to its spec."""
    key = str(name).strip().lower()
    if key == "ns":
        return SelectorSpec("ns")
    if key == "at":
        return SelectorSpec("at", MatrixClass.DIAGONAL)
    if len(key) >= 3 and key[:-1] in ("cv", "pi", "scv", "it") and key[-1] in "ud":
        cls = MatrixClass.DIAGONAL if key[-1] == "d" else MatrixClass.UNCONSTRAINED
        return SelectorSpec(key[:-1], cls)
    raise ValidationError(
        f"unknown selector {name!r}; expected one of {', '.join(SELECTOR_NAMES)}"
    )


@dataclasses.dataclass(frozen=True)
class SelectionResult:
    """Selected bandwidth plus optimizer diagnostics."""

    H: BandwidthMatrix
    value: float  # criterion value, or residual for the it method
    evaluations: int
    converged: bool
    name: str
    pilot: np.ndarray | None = None

    def to_dict(self) -> dict:
        # plain builtins only: np.bool_ and np.int64 are not JSON types
        return {
            "selector": self.name,
            "H": self.H.matrix.tolist(),
            "value": None if np.isnan(self.value) else float(self.value),
            "evaluations": int(self.evaluations),
            "converged": bool(self.converged),
            "pilot": None if self.pilot is None else np.asarray(self.pilot).tolist(),
        }


def _theta_from(H: np.ndarray, matrix_class: MatrixClass) -> np.ndarray:
    d = H.shape[0]
    if matrix_class is MatrixClass.DIAGONAL:
        return np.log(np.diag(H))
    # off-diagonals as ratios L_ij / L_jj: every coordinate then shifts or
    # stays fixed under H -> c^2 H, so simplex spans and xatol mean the
    # same thing at every data scale and the search is scale-equivariant
    L = np.linalg.cholesky(H)
    rows, cols = np.tril_indices(d, -1)
    return np.concatenate([np.log(np.diag(L)), L[rows, cols] / np.diag(L)[cols]])


def _H_from(theta: np.ndarray, d: int, matrix_class: MatrixClass) -> np.ndarray:
    if matrix_class is MatrixClass.DIAGONAL:
        return np.diag(np.exp(np.clip(theta, -300.0, 300.0)))
    L = np.zeros((d, d))
    diag = np.exp(np.clip(theta[:d], -150.0, 150.0))
    L[np.diag_indices(d)] = diag
    rows, cols = np.tril_indices(d, -1)
    L[rows, cols] = theta[d:] * diag[cols]
    return L @ L.T


def _simplex_around(theta0: np.ndarray, spans: np.ndarray) -> np.ndarray:
    k = theta0.size
    simplex = np.tile(theta0, (k + 1, 1))
    for i in range(k):
        simplex[i + 1, i] += spans[i]
    return simplex


def _run_simplex(objective, simplex, spec: SelectorSpec, fatol: float):
    return minimize(
        objective,
        simplex[0],
        method="Nelder-Mead",
        options={
            "initial_simplex": simplex,
            "maxfev": spec.max_evals,
            "xatol": spec.x_tol,
            "fatol": fatol,
        },
    )


def _polish_root(criterion, H: BandwidthMatrix, value: float, spec: SelectorSpec):
    """Sharpen an it root along the scalar direction t*H via bisection.

    The simplex leaves the iterate near the residual's zero set; the
    residual changes sign along the scalar family, so a 1-d root finder
    nails it without disturbing the matrix shape.
    """
    H_raw = H.matrix
    count = 0

    def scaled(t: float) -> float:
        nonlocal count
        count += 1
        return criterion(BandwidthMatrix(t * H_raw, matrix_class=spec.matrix_class))

    bracket = None
    for grid in (np.geomspace(0.8, 1.25, 9), np.geomspace(0.25, 4.0, 25)):
        vals = []
        for t in grid:
            try:
                r = scaled(float(t))
            except (ValidationError, np.linalg.LinAlgError):
                r = np.nan
            vals.append(r)
        for a, b, ra, rb in zip(grid, grid[1:], vals, vals[1:]):
            if np.isfinite(ra) and np.isfinite(rb) and ra * rb <= 0.0:
                if bracket is None or abs(math.log(a)) < abs(math.log(bracket[0])):
                    bracket = (float(a), float(b))
        if bracket is not None:
            break
    if bracket is None:
        return H, value, count
    t_root = brentq(scaled, bracket[0], bracket[1], xtol=1e-12, rtol=1e-14)
    polished = BandwidthMatrix(t_root * H_raw, matrix_class=spec.matrix_class)
    r_root = criterion(polished)
    count += 1
    if abs(r_root) < abs(value):
        return polished, r_root, count
    return H, value, count


def select(spec: SelectorSpec, data, workspace: SelectorWorkspace | None = None) -> SelectionResult:
    """Run one selector on a dataset.

    cv/pi/scv minimize their criterion, it minimizes the squared residual,
    all over the spec's matrix class via Nelder-Mead on an unconstrained
    parametrization, started at the normal-scale bandwidth (its diagonal
    for the diagonal class) with a restart pass spanning half/double that
    start.  The optimizer never raises; a failed search returns the best
    iterate with converged=False.
    """
    ws = workspace if workspace is not None else SelectorWorkspace(data)
    d = ws.d

    if spec.method == "ns":
        return SelectionResult(ns_bandwidth(ws.data), float("nan"), 0, True, "ns")
    if spec.method == "at":
        return SelectionResult(at_bandwidth(ws.data), float("nan"), 0, True, "at")

    pilot = None
    if spec.needs_pilot:
        if isinstance(spec.pilot, str):
            if spec.pilot != "normal-scale":
                raise ValidationError(f"unknown pilot rule {spec.pilot!r}")
            pilot = normal_scale_pilot(ws.data)
        else:
            pilot = _as_bandwidth(spec.pilot, d)

    if spec.method == "cv":
        criterion = ws.cv
    elif spec.method == "pi":
        criterion = lambda H: ws.pi(H, pilot)
    elif spec.method == "scv":
        criterion = lambda H: ws.scv(H, pilot)
    else:
        criterion = lambda H: ws.it(H, pilot)

    def objective(theta):
        try:
            H = BandwidthMatrix(
                _H_from(theta, d, spec.matrix_class), matrix_class=spec.matrix_class
            )
            val = criterion(H)
        except (ValidationError, np.linalg.LinAlgError):
            return np.inf
        if spec.method == "it":
            val = val * val
        return val if np.isfinite(val) else np.inf

    ns = ns_bandwidth(ws.data).matrix
    start = np.diag(np.diag(ns)) if spec.matrix_class is MatrixClass.DIAGONAL else ns
    theta0 = _theta_from(start, spec.matrix_class)
    k = theta0.size

    f0 = objective(theta0)
    fatol = spec.f_tol * (abs(f0) if np.isfinite(f0) and f0 != 0.0 else 1.0)

    first = _run_simplex(
        objective, _simplex_around(theta0, np.full(k, 0.25)), spec, fatol
    )

    # restart around the incumbent with spans drawn from half/double the
    # normal-scale start (log-scale half-width ln 2 on variance axes)
    lo = _theta_from(0.5 * start, spec.matrix_class)
    hi = _theta_from(2.0 * start, spec.matrix_class)
    spans = np.maximum(np.abs(hi - lo) / 2.0, 0.25)
    second = _run_simplex(objective, _simplex_around(first.x, spans), spec, fatol)

    best = second if second.fun < first.fun else first
    evaluations = int(first.nfev + second.nfev) + 1
    H_best = BandwidthMatrix(
        _H_from(best.x, d, spec.matrix_class), matrix_class=spec.matrix_class
    )
    value = criterion(H_best)
    if spec.method == "it":
        H_best, value, extra = _polish_root(criterion, H_best, value, spec)
        evaluations += extra
        converged = abs(value) <= spec.it_rtol * abs(ws._first_term(H_best))
    else:
        converged = bool(best.success) and np.isfinite(value)
    return SelectionResult(
        H_best,
        float(value),
        evaluations,
        converged,
        spec.name,
        None if pilot is None else pilot.matrix,
    )
