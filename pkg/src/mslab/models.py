"""True density models, their registry, and ideal (population) clusterings.

Two model families are supported:

* finite normal mixtures, with closed-form density and gradient;
* noisy ring segments: a point uniform in angle on an arc plus isotropic
  N(0, sigma_r^2 I) noise, optionally mixed with Gaussian blob
  components.  The density is the angular integral of Gaussians centered
  on the arc, evaluated by Gauss-Legendre quadrature over the angle
  interval; the gradient is taken by central finite differences of that
  quadrature density.

The shipped registry entries are reconstructions: qualitative stand-ins
with the documented cluster counts, not transcriptions of any published
parameter set (their exact sources are out of scope here).
"""

from __future__ import annotations

import csv
import dataclasses
import json
from importlib import resources

import numpy as np

from .errors import NumericalError, ValidationError
from .kernels import BandwidthMatrix, rescaled_kernel
from .meanshift import _canonical_labels, _single_linkage_components
from .partition import GridSpec, SpacePartition, cell_masses

__all__ = [
    "MixtureComponent",
    "MixtureModel",
    "RingSegment",
    "RingSegmentModel",
    "IdealClustering",
    "ideal_clustering",
    "load_registry",
    "save_points",
    "load_points",
]

# Finite-difference step for ring gradients, as a fraction of model scale.
FD_STEP_FRACTION = 1e-5

# Quadrature nodes per angular feature width (sigma_r / radius); floor 48.
NODES_PER_FEATURE = 8
MIN_NODES = 48
MAX_NODES = 4096

_CHUNK = 8192  # row chunk for ring density evaluation, caps memory


def _check_weights(weights, what: str) -> None:
    w = np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValidationError(f"{what}: weights must be positive")
    if abs(w.sum() - 1.0) > 1e-8:
        raise ValidationError(f"{what}: weights sum to {w.sum():.10f}, expected 1")


@dataclasses.dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        if self.mean.ndim != 1:
            raise ValidationError("component mean must be a vector")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValidationError("component covariance shape does not match its mean")


class MixtureModel:
    """Finite normal mixture with SPD component covariances."""

    def __init__(self, components, name: str = "mixture", true_clusters: int = 1,
                 reconstruction: bool = False):
        comps = list(components)
        if not comps:
            raise ValidationError("mixture needs at least one component")
        _check_weights([c.weight for c in comps], f"model {name!r}")
        dims = {c.mean.size for c in comps}
        if len(dims) != 1:
            raise ValidationError(f"model {name!r}: components have mixed dimensions")
        self.components = comps
        self.name = name
        self.true_clusters = int(true_clusters)
        self.reconstruction = bool(reconstruction)
        # BandwidthMatrix validates SPD and provides cholesky/inverse
        self._bw = [BandwidthMatrix(c.cov) for c in comps]

    @property
    def dim(self) -> int:
        return self.components[0].mean.size

    def density(self, x):
        pts = np.asarray(x, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = np.zeros(pts.shape[0])
        for comp, bw in zip(self.components, self._bw):
            out += comp.weight * rescaled_kernel(pts - comp.mean, bw)
        return float(out[0]) if single else out

    def gradient(self, x):
        pts = np.asarray(x, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = np.zeros_like(pts)
        for comp, bw in zip(self.components, self._bw):
            diff = pts - comp.mean
            dens = comp.weight * rescaled_kernel(diff, bw)
            out -= dens[:, None] * (diff @ bw.inverse)
        return out[0] if single else out

    def sample(self, n: int, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        counts = rng.multinomial(n, [c.weight for c in self.components])
        blocks = []
        for comp, bw, m in zip(self.components, self._bw, counts):
            z = rng.standard_normal((m, self.dim))
            blocks.append(comp.mean + z @ bw.chol.T)
        return np.vstack(blocks)

    def covariance(self) -> np.ndarray:
        mean = sum(c.weight * c.mean for c in self.components)
        second = sum(
            c.weight * (c.cov + np.outer(c.mean, c.mean)) for c in self.components
        )
        return second - np.outer(mean, mean)

    @property
    def scale_sq(self) -> float:
        """Mean per-coordinate variance; the model's squared length scale."""
        return float(np.trace(self.covariance()) / self.dim)

    def base_rectangle(self):
        """Union of component 5-standard-deviation boxes."""
        lows = np.full(self.dim, np.inf)
        highs = np.full(self.dim, -np.inf)
        for c in self.components:
            sd = np.sqrt(np.diag(c.cov))
            lows = np.minimum(lows, c.mean - 5.0 * sd)
            highs = np.maximum(highs, c.mean + 5.0 * sd)
        return lows, highs


@dataclasses.dataclass(frozen=True)
class RingSegment:
    weight: float
    center: np.ndarray
    radius: float
    theta_start: float
    theta_end: float
    sigma_r: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.center.shape != (2,):
            raise ValidationError("ring segments are two-dimensional")
        if self.sigma_r <= 0:
            raise ValidationError("sigma_r must be positive")
        if self.radius <= 3.0 * self.sigma_r:
            raise ValidationError(
                f"radius {self.radius} must exceed 3 sigma_r = {3.0 * self.sigma_r}"
            )
        span = self.theta_end - self.theta_start
        if not 0.0 < span <= 2.0 * np.pi + 1e-12:
            raise ValidationError("angle interval must be increasing, at most a full turn")


class _SegmentQuadrature:
    """Precomputed arc nodes so a segment acts as a Gaussian mixture."""

    def __init__(self, seg: RingSegment):
        span = seg.theta_end - seg.theta_start
        n = int(np.ceil(NODES_PER_FEATURE * span / (seg.sigma_r / seg.radius)))
        n = min(max(n, MIN_NODES), MAX_NODES)
        nodes, weights = np.polynomial.legendre.leggauss(n)
        theta = 0.5 * span * nodes + 0.5 * (seg.theta_start + seg.theta_end)
        self.arc = seg.center + seg.radius * np.column_stack(
            [np.cos(theta), np.sin(theta)]
        )
        self.node_weights = weights / weights.sum()  # uniform angle law
        self.seg = seg


class RingSegmentModel:
    """Noisy ring-segment mixture, optionally with Gaussian blobs."""

    def __init__(self, segments, blobs=(), name: str = "ring", true_clusters: int = 1,
                 reconstruction: bool = False):
        segs = list(segments)
        blobs = list(blobs)
        if not segs:
            raise ValidationError("ring model needs at least one segment")
        _check_weights(
            [s.weight for s in segs] + [b.weight for b in blobs], f"model {name!r}"
        )
        for b in blobs:
            if b.mean.size != 2:
                raise ValidationError(f"model {name!r}: blob components must be 2-d")
        self.segments = segs
        self.blobs = blobs
        self.name = name
        self.true_clusters = int(true_clusters)
        self.reconstruction = bool(reconstruction)
        self._quad = [_SegmentQuadrature(s) for s in segs]
        self._blob_bw = [BandwidthMatrix(b.cov) for b in blobs]

    @property
    def dim(self) -> int:
        return 2

    def density(self, x):
        pts = np.asarray(x, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = np.zeros(pts.shape[0])
        for quad in self._quad:
            sig2 = quad.seg.sigma_r**2
            norm = quad.seg.weight / (2.0 * np.pi * sig2)
            arc_sq = np.sum(quad.arc * quad.arc, axis=1)
            for start in range(0, pts.shape[0], _CHUNK):
                chunk = pts[start : start + _CHUNK]
                d2 = (
                    np.sum(chunk * chunk, axis=1)[:, None]
                    - 2.0 * (chunk @ quad.arc.T)
                    + arc_sq[None, :]
                )
                np.maximum(d2, 0.0, out=d2)
                out[start : start + chunk.shape[0]] += norm * (
                    np.exp(-0.5 * d2 / sig2) @ quad.node_weights
                )
        for blob, bw in zip(self.blobs, self._blob_bw):
            out += blob.weight * rescaled_kernel(pts - blob.mean, bw)
        return float(out[0]) if single else out

    def gradient(self, x):
        """Central finite differences of the quadrature density."""
        pts = np.asarray(x, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        h = FD_STEP_FRACTION * np.sqrt(self.scale_sq)
        out = np.empty_like(pts)
        for k in range(2):
            shift = np.zeros(2)
            shift[k] = h
            out[:, k] = (self.density(pts + shift) - self.density(pts - shift)) / (2.0 * h)
        return out[0] if single else out

    def sample(self, n: int, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        weights = [s.weight for s in self.segments] + [b.weight for b in self.blobs]
        counts = rng.multinomial(n, weights)
        blocks = []
        for seg, m in zip(self.segments, counts[: len(self.segments)]):
            theta = rng.uniform(seg.theta_start, seg.theta_end, size=m)
            arc = seg.center + seg.radius * np.column_stack([np.cos(theta), np.sin(theta)])
            blocks.append(arc + seg.sigma_r * rng.standard_normal((m, 2)))
        for blob, bw, m in zip(self.blobs, self._blob_bw, counts[len(self.segments) :]):
            z = rng.standard_normal((m, 2))
            blocks.append(blob.mean + z @ bw.chol.T)
        return np.vstack(blocks)

    def covariance(self) -> np.ndarray:
        mean = np.zeros(2)
        second = np.zeros((2, 2))
        for quad in self._quad:
            seg = quad.seg
            m1 = quad.node_weights @ quad.arc
            m2 = (quad.arc.T * quad.node_weights) @ quad.arc + seg.sigma_r**2 * np.eye(2)
            mean += seg.weight * m1
            second += seg.weight * m2
        for blob in self.blobs:
            mean += blob.weight * blob.mean
            second += blob.weight * (blob.cov + np.outer(blob.mean, blob.mean))
        return second - np.outer(mean, mean)

    @property
    def scale_sq(self) -> float:
        return float(np.trace(self.covariance()) / 2.0)

    def base_rectangle(self):
        """Arc extents (plus blob boxes) padded by 5 radial deviations."""
        lows = np.full(2, np.inf)
        highs = np.full(2, -np.inf)
        for seg in self.segments:
            ext_lo, ext_hi = _arc_extent(seg)
            lows = np.minimum(lows, ext_lo - 5.0 * seg.sigma_r)
            highs = np.maximum(highs, ext_hi + 5.0 * seg.sigma_r)
        for blob in self.blobs:
            sd = np.sqrt(np.diag(blob.cov))
            lows = np.minimum(lows, blob.mean - 5.0 * sd)
            highs = np.maximum(highs, blob.mean + 5.0 * sd)
        return lows, highs


def _arc_extent(seg: RingSegment):
    """Tight bounding box of the arc {center + radius e(theta)}."""
    candidates = [seg.theta_start, seg.theta_end]
    # interior critical angles of cos/sin, shifted into the interval
    k_lo = int(np.floor(seg.theta_start / (0.5 * np.pi)))
    k_hi = int(np.ceil(seg.theta_end / (0.5 * np.pi)))
    for k in range(k_lo, k_hi + 1):
        t = 0.5 * np.pi * k
        if seg.theta_start <= t <= seg.theta_end:
            candidates.append(t)
    t = np.array(candidates)
    xs = seg.center[0] + seg.radius * np.cos(t)
    ys = seg.center[1] + seg.radius * np.sin(t)
    return np.array([xs.min(), ys.min()]), np.array([xs.max(), ys.max()])


@dataclasses.dataclass(frozen=True)
class IdealClustering:
    """Population clustering of a grid under the true density."""

    partition: SpacePartition
    modes: np.ndarray
    n_flagged: int
    model_name: str


def ideal_clustering(
    model,
    grid: GridSpec,
    beta: float = 0.05,
    step_tol: float = 1e-6,
    max_iter: int = 1000,
    merge_factor: float = 1.5,
    stall_tol: float = 1e-2,
    stall_after: int = 150,
) -> IdealClustering:
    """Gradient-ascent clustering of every grid cell under the true density.

    The base update is y + a Df(y) / f(y) with the fixed isotropic matrix
    a I, a = beta * (mean per-coordinate model variance).  The raw step is
    halved while it would decrease the density (the fixed step provably
    diverges when a exceeds twice the smallest local curvature scale, as
    it does on thin ring ridges), which preserves the ascent property.

    Ridge plateaus make the strict step criterion unreachable for cells
    whose limit creeps along an almost-flat ridge (an arc's interior is
    nearly uniform along the ridge, so tangential gradients are
    exponentially small there while honest basins contract
    geometrically).  After stall_after iterations, a cell whose step norm
    is below stall_tol (same Mahalanobis units as step_tol) and has
    shrunk by less than 25% over the last 20 iterations is frozen: it
    sits on the attractor set, radially converged, so it joins the limit
    pool but stays flagged as not strictly converged.  Candidate modes
    must be genuine local maxima: each is probed on a small circle and
    dissolved if any probe density exceeds it (saddles capture symmetric
    grid trajectories).  Pooled limits merge by single linkage at
    merge_factor times the grid spacing, so ridge-shaped attractors chain
    into one cluster.  Remaining flagged cells take the label of the
    nearest pooled limit point, which respects elongated ridge clusters
    where nearest-mode assignment would not.
    """
    pts = grid.points()
    a = beta * model.scale_sq
    root_a = np.sqrt(a)
    step_tol_eu = step_tol * root_a  # step_tol is in Mahalanobis units of a I
    stall_tol_eu = stall_tol * root_a
    window = 20
    cur = pts.copy()
    n = pts.shape[0]
    converged = np.zeros(n, dtype=bool)
    stalled = np.zeros(n, dtype=bool)
    window_sq = np.full(n, np.inf)  # step norms one window ago
    active = np.arange(n)
    for it in range(max_iter):
        if active.size == 0:
            break
        f = np.asarray(model.density(cur[active]))
        ok = f > 1e-300
        grad = np.asarray(model.gradient(cur[active]))
        step = np.zeros_like(grad)
        step[ok] = a * grad[ok] / f[ok, None]
        trial = cur[active] + step
        f_trial = np.asarray(model.density(trial))
        shrink = np.nonzero(ok & (f_trial < f))[0]
        for _halving in range(30):
            if shrink.size == 0:
                break
            step[shrink] *= 0.5
            trial[shrink] = cur[active][shrink] + step[shrink]
            f_trial[shrink] = np.asarray(model.density(trial[shrink]))
            shrink = shrink[f_trial[shrink] < f[shrink]]
        step[shrink] = 0.0
        trial[shrink] = cur[active][shrink]
        step_norm_sq = np.sum(step * step, axis=1)
        cur[active] = trial
        done = ok & (step_norm_sq < step_tol_eu**2)
        converged[active[done]] = True
        drop = done | ~ok
        if it % window == window - 1:
            if it >= stall_after:
                creep = (
                    ok
                    & ~done
                    & (step_norm_sq < stall_tol_eu**2)
                    & (step_norm_sq > 0.5625 * window_sq[active])
                )
                stalled[active[creep]] = True
                drop = drop | creep
            window_sq[active] = step_norm_sq
        active = active[~drop]

    n_flagged = int(np.sum(~converged))
    # Stalled creepers sit on a ridge plateau: radially converged, crawling
    # tangentially along the attractor set.  Their positions are legitimate
    # limit representatives, so they join the merge pool (still counted as
    # flagged); ridge members chain into one component by single linkage.
    pool = converged | stalled
    if not np.any(pool):
        raise NumericalError(
            f"ideal clustering of {model.name!r}: no trajectory converged"
        )
    merge_tol = merge_factor * float(np.max(grid.spacings()))
    comp_conv = _single_linkage_components(
        cur[pool], merge_tol, collapse_side=merge_tol / 64.0
    )
    dens_conv = np.asarray(model.density(cur[pool]))
    n_comp = int(comp_conv.max()) + 1
    mode_list = np.empty((n_comp, grid.dim))
    for cid in range(n_comp):
        members = np.nonzero(comp_conv == cid)[0]
        mode_list[cid] = cur[pool][members[np.argmax(dens_conv[members])]]

    # a candidate mode survives only if no nearby probe beats its density
    probe_r = 0.25 * merge_tol
    angles = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
    circle = probe_r * np.column_stack([np.cos(angles), np.sin(angles)])
    keep = []
    for cid in range(n_comp):
        fm = float(model.density(mode_list[cid]))
        if grid.dim == 2:
            probes = mode_list[cid] + circle
        else:
            probes = mode_list[cid] + probe_r * np.vstack(
                [np.eye(grid.dim), -np.eye(grid.dim)]
            )
        if np.max(np.asarray(model.density(probes))) <= fm * (1.0 + 1e-6):
            keep.append(cid)
    if not keep:
        raise NumericalError(
            f"ideal clustering of {model.name!r}: every candidate mode failed "
            "the local-maximum probe"
        )
    keep_map = {cid: k for k, cid in enumerate(keep)}
    n_dissolved = n_comp - len(keep)
    genuine = np.isin(comp_conv, keep)
    pool_idx = np.nonzero(pool)[0]
    pool[pool_idx[~genuine]] = False  # saddle sitters join the stray pool

    raw = np.empty(n, dtype=int)
    raw[pool] = [keep_map[c] for c in comp_conv[genuine]]
    strays = ~pool
    if np.any(strays):
        from scipy.spatial import cKDTree

        tree = cKDTree(cur[pool])
        _, nearest = tree.query(cur[strays])
        raw[strays] = raw[np.nonzero(pool)[0][nearest]]
    labels, order = _canonical_labels(raw)
    modes = mode_list[keep][order]

    masses = cell_masses(model, grid)
    metadata = {
        "mass_source": "model",
        "leakage": 1.0 - float(masses.sum()),
        "non_converged": n_flagged,
        "stalled": int(stalled.sum()),
        "dissolved_saddles": n_dissolved,
        "modes": modes.tolist(),
        "ascent": "guarded normalized gradient",
        "merge_tol": merge_tol,
    }
    partition = SpacePartition(grid, labels, masses, int(labels.max()) + 1, metadata)
    return IdealClustering(partition, modes, n_flagged, model.name)


# ---------------------------------------------------------------------------
# registry


def _component_from_dict(entry: dict, what: str) -> MixtureComponent:
    try:
        return MixtureComponent(
            weight=float(entry["weight"]),
            mean=np.asarray(entry["mean"], dtype=float),
            cov=np.asarray(entry["cov"], dtype=float),
        )
    except KeyError as exc:
        raise ValidationError(f"{what}: component missing key {exc}") from None


def _model_from_entry(entry: dict):
    for key in ("name", "type", "true_clusters", "params"):
        if key not in entry:
            raise ValidationError(f"registry entry missing key {key!r}: {entry}")
    name = entry["name"]
    kind = entry["type"]
    params = entry["params"]
    recon = bool(entry.get("reconstruction", False))
    clusters = int(entry["true_clusters"])
    if kind == "mixture":
        comps = [
            _component_from_dict(c, f"model {name!r}") for c in params["components"]
        ]
        model = MixtureModel(comps, name=name, true_clusters=clusters, reconstruction=recon)
    elif kind == "ring":
        segs = []
        for s in params["segments"]:
            a0, a1 = (float(v) for v in s["angles_deg"])
            segs.append(
                RingSegment(
                    weight=float(s["weight"]),
                    center=np.asarray(s["center"], dtype=float),
                    radius=float(s["radius"]),
                    theta_start=np.deg2rad(a0),
                    theta_end=np.deg2rad(a1),
                    sigma_r=float(s["sigma_r"]),
                )
            )
        blobs = [
            _component_from_dict(b, f"model {name!r}") for b in params.get("blobs", [])
        ]
        model = RingSegmentModel(
            segs, blobs, name=name, true_clusters=clusters, reconstruction=recon
        )
    else:
        raise ValidationError(f"model {name!r}: unknown type {kind!r}")
    model.extra = {
        k: v
        for k, v in entry.items()
        if k not in ("name", "type", "true_clusters", "params", "reconstruction")
    }
    return model


def load_registry(path: str | None = None) -> dict:
    """Load a model registry; the packaged default when path is None."""
    if path is None:
        text = resources.files("mslab").joinpath("data/models.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"registry is not valid JSON: {exc}") from None
    entries = doc.get("models")
    if not isinstance(entries, list) or not entries:
        raise ValidationError("registry must contain a nonempty 'models' list")
    registry: dict = {}
    for entry in entries:
        model = _model_from_entry(entry)
        if model.name in registry:
            raise ValidationError(f"duplicate model name {model.name!r} in registry")
        registry[model.name] = model
    return registry


# ---------------------------------------------------------------------------
# point-set CSV interchange


def save_points(path: str, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ValidationError(f"points must be a 2-d array, got shape {pts.shape}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{k + 1}" for k in range(pts.shape[1])])
        for row in pts:
            writer.writerow([f"{v:.17g}" for v in row])


def load_points(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if not rows:
        raise ValidationError(f"{path}: empty point file")
    start = 0
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        start = 1  # header row
    if start == len(rows):
        raise ValidationError(f"{path}: no data rows")
    try:
        pts = np.array([[float(v) for v in row] for row in rows[start:]])
    except ValueError as exc:
        raise ValidationError(f"{path}: malformed row ({exc})") from None
    if pts.ndim != 2 or not np.all(np.isfinite(pts)):
        raise ValidationError(f"{path}: points must be finite rows of equal width")
    return pts
