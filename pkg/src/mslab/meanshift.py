"""Mean shift iteration with unconstrained bandwidth matrices.

The update is the Gaussian-kernel weighted mean

    y_next = sum_i w_i(y) X_i,   w_i(y) ~ exp(-M_H(y, X_i) / 2),

normalized with the largest exponent shifted to zero so weights never
underflow collectively.  For the Gaussian kernel this equals the
normalized gradient ascent step y + H Df(y) / f(y) exactly.

All iteration happens in whitened coordinates z = L^(-1) y (H = L L'),
where M_H is the squared Euclidean distance and the update is the same
weighted mean of whitened data.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import NumericalError, ValidationError
from .kernels import BandwidthMatrix

__all__ = [
    "MeanShiftConfig",
    "ConvergeResult",
    "ClusterResult",
    "kde",
    "kde_gradient",
    "mean_shift_step",
    "converge",
    "cluster",
]

# Relative tolerance for the ascent check: the kde value along a trajectory
# may dip by at most this fraction of its current value.
ASCENT_RTOL = 1e-10


@dataclasses.dataclass(frozen=True)
class MeanShiftConfig:
    """Iteration controls.

    step_tol and merge_tol are in Mahalanobis units under the bandwidth in
    use: iteration stops when M_H(y_next, y) < step_tol**2, and limit
    points with pairwise M_H below merge_tol**2 merge into one mode via
    single linkage.  density_floor=None resolves to 1e-12 times the
    largest kde value over the data points themselves.
    """

    step_tol: float = 1e-6
    merge_tol: float = 1e-2
    max_iter: int = 500
    density_floor: float | None = None

    def __post_init__(self):
        if self.step_tol <= 0 or self.merge_tol <= 0:
            raise ValidationError("step_tol and merge_tol must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if self.density_floor is not None and self.density_floor < 0:
            raise ValidationError("density_floor must be nonnegative")

    def resolve_floor(self, data: np.ndarray, H: BandwidthMatrix) -> float:
        if self.density_floor is not None:
            return self.density_floor
        return 1e-12 * float(np.max(kde(data, data, H)))


@dataclasses.dataclass(frozen=True)
class ConvergeResult:
    """One trajectory: its limit, step count, and density sequence."""

    mode: np.ndarray
    iterations: int
    densities: np.ndarray  # kde at start and after every step
    converged: bool
    ascent_ok: bool


@dataclasses.dataclass(frozen=True)
class ClusterResult:
    """Batched clustering outcome.

    modes[labels[i]] is the attractor of query point i.  Labels are
    canonical: 0, 1, ... in order of first appearance over the query set.
    """

    modes: np.ndarray
    labels: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    ascent_ok: np.ndarray
    final_density: np.ndarray
    low_density: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]


def _check_data(data, H: BandwidthMatrix) -> np.ndarray:
    x = np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValidationError(f"data must be a nonempty (n, d) matrix, got shape {x.shape}")
    if x.shape[1] != H.dim:
        raise ValidationError(f"data dimension {x.shape[1]} != bandwidth dimension {H.dim}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("data contains non-finite entries")
    return x


def _sq_dists(a: np.ndarray, b: np.ndarray, b_sq: np.ndarray) -> np.ndarray:
    # ||a_i - b_j||^2 via the expansion; adequate for kernel weights where
    # absolute errors ~ 1e-12 are irrelevant.  Never used for step sizes.
    m = a @ b.T
    m *= -2.0
    m += np.sum(a * a, axis=1)[:, None]
    m += b_sq[None, :]
    np.maximum(m, 0.0, out=m)
    return m


def _log_kde_and_next(yw, xw, xw_sq, log_norm):
    """One batched update in whitened coordinates.

    Returns (next whitened points, log kde at current points).
    """
    m = _sq_dists(yw, xw, xw_sq)
    shift = m.min(axis=1)
    w = np.exp(-0.5 * (m - shift[:, None]))
    s = w.sum(axis=1)
    nxt = (w @ xw) / s[:, None]
    log_f = log_norm - 0.5 * shift + np.log(s)
    return nxt, log_f


def _prepare(data, H):
    """Whitened data, its squared norms, and the log kde normalization."""
    xw = data @ H.chol_inv.T
    center = xw.mean(axis=0)
    xw = xw - center  # centering keeps squared norms small in _sq_dists
    xw_sq = np.sum(xw * xw, axis=1)
    n, d = data.shape
    log_norm = -0.5 * (d * np.log(2.0 * np.pi) + H.log_det) - np.log(n)
    return xw, xw_sq, center, log_norm


def kde(x, data, H: BandwidthMatrix):
    """Kernel density estimate n^(-1) sum_i K_H(x - X_i).

    Accepts a single point (d,) or a batch (m, d).
    """
    data = _check_data(data, H)
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    xw, xw_sq, center, log_norm = _prepare(data, H)
    yw = pts @ H.chol_inv.T - center
    m = _sq_dists(yw, xw, xw_sq)
    shift = m.min(axis=1)
    s = np.exp(-0.5 * (m - shift[:, None])).sum(axis=1)
    out = np.exp(log_norm - 0.5 * shift + np.log(s))
    return float(out[0]) if single else out


def kde_gradient(x, data, H: BandwidthMatrix):
    """Gradient of the kernel density estimate at x.

    D f_H(x) = -n^(-1) H^(-1) sum_i K_H(x - X_i) (x - X_i).
    """
    data = _check_data(data, H)
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    xw, xw_sq, center, log_norm = _prepare(data, H)
    yw = pts @ H.chol_inv.T - center
    m = _sq_dists(yw, xw, xw_sq)
    w = np.exp(log_norm - 0.5 * m)  # K_H(x - X_i) / n, may underflow far out
    drift = w @ xw - w.sum(axis=1)[:, None] * yw  # sum_i w_i (z_i - z)
    grad = drift @ H.chol_inv  # L^(-T) applied row-wise
    return grad[0] if single else grad


def mean_shift_step(y, data, H: BandwidthMatrix, config: MeanShiftConfig | None = None):
    """One mean shift update from y; the Gaussian-weighted data mean.

    Raises NumericalError when kde(y) falls below the density floor, since
    the update is numerically meaningless that far from the data.
    """
    config = config or MeanShiftConfig()
    data = _check_data(data, H)
    pt = np.asarray(y, dtype=float)
    if pt.shape != (H.dim,):
        raise ValidationError(f"y must have shape ({H.dim},), got {pt.shape}")
    floor = config.resolve_floor(data, H)
    f = kde(pt, data, H)
    if f < floor:
        raise NumericalError(
            f"kde at {pt.tolist()} is {f:.3e}, below the density floor {floor:.3e}"
        )
    xw, xw_sq, center, _ = _prepare(data, H)
    yw = pt @ H.chol_inv.T - center
    nxt, _ = _log_kde_and_next(yw[None, :], xw, xw_sq, 0.0)
    return (nxt[0] + center) @ H.chol.T


def converge(y, data, H: BandwidthMatrix, config: MeanShiftConfig | None = None) -> ConvergeResult:
    """Iterate mean shift from y until the step drops below step_tol.

    Returns the limit point, the number of steps taken, and the kde value
    at the start and after each step (a non-decreasing sequence up to
    ASCENT_RTOL for the Gaussian kernel).
    """
    config = config or MeanShiftConfig()
    data = _check_data(data, H)
    pt = np.asarray(y, dtype=float)
    if pt.shape != (H.dim,):
        raise ValidationError(f"y must have shape ({H.dim},), got {pt.shape}")
    floor = config.resolve_floor(data, H)
    if kde(pt, data, H) < floor:
        raise NumericalError(
            f"kde at {pt.tolist()} is below the density floor {floor:.3e}"
        )
    xw, xw_sq, center, log_norm = _prepare(data, H)
    yw = pt @ H.chol_inv.T - center
    cur = yw[None, :]
    logs = []
    converged = False
    iterations = 0
    tol_sq = config.step_tol**2
    for _ in range(config.max_iter):
        nxt, log_f = _log_kde_and_next(cur, xw, xw_sq, log_norm)
        logs.append(log_f[0])
        step_sq = float(np.sum((nxt - cur) ** 2))
        cur = nxt
        iterations += 1
        if step_sq < tol_sq:
            converged = True
            break
    logs.append(_log_kde_and_next(cur, xw, xw_sq, log_norm)[1][0])
    densities = np.exp(np.array(logs))
    ascent_ok = bool(np.all(np.diff(np.array(logs)) >= np.log1p(-ASCENT_RTOL)))
    mode = (cur[0] + center) @ H.chol.T
    return ConvergeResult(mode, iterations, densities, converged, ascent_ok)


def _single_linkage_components(points: np.ndarray, tol: float, collapse_side: float) -> np.ndarray:
    """Connected components under 'pairwise distance <= tol' single linkage.

    Points are first collapsed onto a lattice of side collapse_side (one
    centroid representative per occupied cell); exact single linkage then
    runs on representatives.  collapse_side must be well below tol, so
    same-cell points are within tol of each other anyway and the only
    approximation is boundary fuzz of order collapse_side.
    """
    m = points.shape[0]
    if m == 0:
        return np.empty(0, dtype=int)
    if m == 1:
        return np.zeros(1, dtype=int)
    side = min(collapse_side, tol / 8.0)
    cells = np.floor(points / side).astype(np.int64)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    k = uniq.shape[0]
    reps = np.zeros((k, points.shape[1]))
    np.add.at(reps, inverse, points)
    reps /= np.bincount(inverse, minlength=k)[:, None]
    if k == 1:
        return np.zeros(m, dtype=int)
    pairs = cKDTree(reps).query_pairs(tol, output_type="ndarray")
    graph = coo_matrix(
        (np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=(k, k)
    )
    _, comp = connected_components(graph, directed=False)
    return comp[inverse]


def _canonical_labels(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Relabel to 0, 1, ... by first occurrence; returns (labels, order).

    order[new_label] = the raw id that was mapped to new_label.
    """
    uniq, first_idx = np.unique(raw, return_index=True)
    order = uniq[np.argsort(first_idx)]
    remap = np.empty(int(raw.max()) + 1, dtype=int)
    remap[order] = np.arange(order.shape[0])
    return remap[raw], order


def cluster(
    query, data, H: BandwidthMatrix, config: MeanShiftConfig | None = None
) -> ClusterResult:
    """Cluster every query point by its mean shift attractor.

    All trajectories advance in lockstep (converged ones drop out), so the
    result does not depend on query order or batch composition beyond the
    canonical first-occurrence labeling.  Non-converged trajectories are
    flagged and labeled by their final point's merged mode; the batch is
    never aborted.
    """
    config = config or MeanShiftConfig()
    data = _check_data(data, H)
    q = np.asarray(query, dtype=float)
    if q.ndim != 2 or q.shape[1] != H.dim:
        raise ValidationError(f"query must be (m, {H.dim}), got shape {q.shape}")
    nq = q.shape[0]
    if nq == 0:
        raise ValidationError("query set is empty")
    floor = config.resolve_floor(data, H)
    xw, xw_sq, center, log_norm = _prepare(data, H)

    cur = q @ H.chol_inv.T - center
    iterations = np.zeros(nq, dtype=int)
    converged = np.zeros(nq, dtype=bool)
    ascent_ok = np.ones(nq, dtype=bool)
    log_prev = np.full(nq, -np.inf)  # first ascent check passes trivially
    low_density = np.zeros(nq, dtype=bool)
    active = np.arange(nq)
    tol_sq = config.step_tol**2
    ascent_slack = np.log1p(-ASCENT_RTOL)

    for it in range(config.max_iter):
        if active.size == 0:
            break
        nxt, log_f = _log_kde_and_next(cur[active], xw, xw_sq, log_norm)
        if it == 0:  # all points are active here, log_f is kde at the starts
            low_density = np.exp(log_f) < floor
        ascent_ok[active] &= log_f >= log_prev[active] + ascent_slack
        log_prev[active] = log_f
        step_sq = np.sum((nxt - cur[active]) ** 2, axis=1)
        cur[active] = nxt
        iterations[active] += 1
        done = step_sq < tol_sq
        converged[active[done]] = True
        active = active[~done]

    # Density at the final points, for ascent bookkeeping and mode picking.
    _, log_final = _log_kde_and_next(cur, xw, xw_sq, log_norm)
    ascent_ok &= log_final >= log_prev + ascent_slack

    comp = _single_linkage_components(
        cur, config.merge_tol, collapse_side=32.0 * config.step_tol
    )
    labels, order = _canonical_labels(comp)
    modes_w = np.empty((order.shape[0], H.dim))
    for new_id, raw_id in enumerate(order):
        members = np.nonzero(comp == raw_id)[0]
        best = members[np.argmax(log_final[members])]
        modes_w[new_id] = cur[best]
    modes = (modes_w + center) @ H.chol.T
    return ClusterResult(
        modes=modes,
        labels=labels,
        iterations=iterations,
        converged=converged,
        ascent_ok=ascent_ok,
        final_density=np.exp(log_final),
        low_density=low_density,
    )
