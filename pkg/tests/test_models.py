"""Model families, the shipped registry, and ideal clusterings.

Oracles: adaptive quadrature for ring densities, central finite
differences for gradients, closed-form moments, and binomial bounds for
sampling proportions.
"""

import json
import os

import numpy as np
import pytest
from scipy.integrate import quad

from mslab import (
    BandwidthMatrix,
    MixtureComponent,
    MixtureModel,
    RingSegment,
    RingSegmentModel,
    ValidationError,
    build_grid,
    cell_masses,
    ideal_clustering,
    kde,
    load_points,
    load_registry,
    save_points,
)


def _simple_mixture():
    return MixtureModel(
        [
            MixtureComponent(0.3, [-2.0, 0.0], [[0.5, 0.1], [0.1, 0.8]]),
            MixtureComponent(0.7, [2.0, 1.0], [[1.0, -0.2], [-0.2, 0.6]]),
        ],
        name="simple",
        true_clusters=2,
    )


def _arc_model(theta0=0.5, theta1=2.5, radius=2.0, sigma=0.2):
    return RingSegmentModel(
        [RingSegment(1.0, [0.3, -0.4], radius, theta0, theta1, sigma)],
        name="arc",
        true_clusters=1,
    )


def _ring_density_oracle(model, x):
    """Adaptive quadrature of the angular integral, per point."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for seg in model.segments:
        span = seg.theta_end - seg.theta_start
        sig2 = seg.sigma_r**2

        def integrand(t):
            p = seg.center + seg.radius * np.array([np.cos(t), np.sin(t)])
            d = x - p
            return np.exp(-0.5 * (d @ d) / sig2) / (2.0 * np.pi * sig2)

        val, err = quad(
            integrand, seg.theta_start, seg.theta_end, limit=400, epsabs=1e-12
        )
        assert err < 1e-9
        total += seg.weight * val / span
    for blob in model.blobs:
        bw = BandwidthMatrix(blob.cov)
        d = x - blob.mean
        m = d @ bw.inverse @ d
        total += blob.weight * np.exp(-0.5 * m) / (2.0 * np.pi * np.sqrt(bw.det))
    return total


def test_mixture_density_is_weighted_sum_of_normals():
    from scipy.stats import multivariate_normal

    model = _simple_mixture()
    rng = np.random.default_rng(1)
    pts = rng.uniform(-4.0, 4.0, size=(40, 2))
    want = 0.3 * multivariate_normal.pdf(
        pts, [-2.0, 0.0], [[0.5, 0.1], [0.1, 0.8]]
    ) + 0.7 * multivariate_normal.pdf(pts, [2.0, 1.0], [[1.0, -0.2], [-0.2, 0.6]])
    assert np.allclose(model.density(pts), want, rtol=1e-12)
    assert abs(model.density(pts[0]) - want[0]) < 1e-15


def test_mixture_gradient_matches_finite_differences():
    model = _simple_mixture()
    rng = np.random.default_rng(2)
    pts = rng.uniform(-4.0, 4.0, size=(20, 2))
    grad = model.gradient(pts)
    h = 1e-6 * np.sqrt(model.scale_sq)
    for k in range(2):
        shift = np.zeros(2)
        shift[k] = h
        fd = (model.density(pts + shift) - model.density(pts - shift)) / (2.0 * h)
        assert np.allclose(grad[:, k], fd, rtol=1e-6, atol=1e-12)


def test_ring_density_matches_adaptive_quadrature():
    model = _arc_model()
    probes = [
        np.array([0.3 + 2.0, -0.4]),  # on the circle at angle 0 (off the arc)
        np.array([0.3 + 2.0 * np.cos(1.5), -0.4 + 2.0 * np.sin(1.5)]),  # mid arc
        np.array([0.3 + 1.7 * np.cos(0.52), -0.4 + 1.7 * np.sin(0.52)]),  # near end
        np.array([0.3, -0.4]),  # center
        np.array([1.0, 1.0]),
    ]
    for x in probes:
        want = _ring_density_oracle(model, x)
        got = model.density(x)
        assert abs(got - want) < 1e-9 * max(want, 1e-6)


def test_ring_gradient_consistent_with_coarser_differences():
    model = _arc_model()
    rng = np.random.default_rng(3)
    theta = rng.uniform(0.5, 2.5, size=12)
    pts = (
        np.array([0.3, -0.4])
        + 2.0 * np.column_stack([np.cos(theta), np.sin(theta)])
        + 0.1 * rng.standard_normal((12, 2))
    )
    grad = model.gradient(pts)
    h = 1e-3 * np.sqrt(model.scale_sq)
    for k in range(2):
        shift = np.zeros(2)
        shift[k] = h
        fd = (model.density(pts + shift) - model.density(pts - shift)) / (2.0 * h)
        scale = np.max(np.abs(fd))
        assert np.allclose(grad[:, k], fd, atol=2e-4 * scale)


def test_full_circle_density_is_rotation_invariant():
    model = RingSegmentModel(
        [RingSegment(1.0, [0.0, 0.0], 2.0, 0.0, 2.0 * np.pi, 0.15)],
        name="circle",
        true_clusters=1,
    )
    ang = np.linspace(0.0, 2.0 * np.pi, 13)[:-1]
    on_ring = 2.0 * np.column_stack([np.cos(ang), np.sin(ang)])
    vals = model.density(on_ring)
    assert (vals.max() - vals.min()) < 1e-6 * vals.mean()
    # exact second moments: diag(R^2/2 + sigma^2), zero mean
    cov = model.covariance()
    assert np.allclose(cov, np.diag([2.0**2 / 2 + 0.15**2] * 2), atol=1e-10)


def test_arc_extent_uses_interior_critical_angles():
    # arc spanning 30..60 degrees: x extreme at the ends, y extreme too
    seg = RingSegment(1.0, [0.0, 0.0], 2.0, np.pi / 6, np.pi / 3, 0.1)
    model = RingSegmentModel([seg], name="short-arc", true_clusters=1)
    lo, hi = model.base_rectangle()
    assert abs(hi[0] - (2.0 * np.cos(np.pi / 6) + 0.5)) < 1e-12
    assert abs(lo[0] - (2.0 * np.cos(np.pi / 3) - 0.5)) < 1e-12
    # arc through 90 degrees: y extreme is the interior critical angle
    seg2 = RingSegment(1.0, [0.0, 0.0], 2.0, np.pi / 4, 3 * np.pi / 4, 0.1)
    model2 = RingSegmentModel([seg2], name="top-arc", true_clusters=1)
    lo2, hi2 = model2.base_rectangle()
    assert abs(hi2[1] - 2.5) < 1e-12


def test_sampling_reproducible_and_consistent():
    model = _simple_mixture()
    a = model.sample(500, 123)
    b = model.sample(500, 123)
    c = model.sample(500, 124)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (500, 2)


def test_sampling_moments_and_proportions():
    model = _simple_mixture()
    n = 40000
    pts = model.sample(n, 9)
    mean = 0.3 * np.array([-2.0, 0.0]) + 0.7 * np.array([2.0, 1.0])
    assert np.allclose(pts.mean(axis=0), mean, atol=0.05)
    assert np.allclose(np.cov(pts.T), model.covariance(), atol=0.1)
    # left component proportion within 4 binomial standard deviations
    frac = np.mean(pts[:, 0] < 0.0)
    sd = np.sqrt(0.3 * 0.7 / n)
    assert abs(frac - 0.3) < 4.0 * sd + 0.01  # +0.01 for overlap across x=0


def test_ring_sampling_moments():
    model = _arc_model()
    pts = model.sample(40000, 31)
    emp_mean = pts.mean(axis=0)
    emp_cov = np.cov(pts.T)
    want_cov = model.covariance()
    # first moment from the same quadrature nodes used by the density
    quadm = model._quad[0]
    want_mean = quadm.node_weights @ quadm.arc
    assert np.allclose(emp_mean, want_mean, atol=0.03)
    assert np.allclose(emp_cov, want_cov, atol=0.05)


def test_registry_ships_documented_models():
    reg = load_registry()
    names = list(reg)
    assert names == ["trimodal", "quadrimodal", "four-crescent", "broken-ring", "eye"]
    counts = {name: m.true_clusters for name, m in reg.items()}
    assert counts == {
        "trimodal": 3,
        "quadrimodal": 4,
        "four-crescent": 4,
        "broken-ring": 5,
        "eye": 5,
    }
    for m in reg.values():
        assert m.reconstruction
        assert m.dim == 2


def test_registry_rectangles_hold_the_mass():
    reg = load_registry()
    for m in reg.values():
        grid = build_grid(m, resolution=120)
        total = cell_masses(m, grid).sum()
        assert 0.998 < total < 1.0 + 1e-3, m.name


def test_samples_match_density_smoke():
    # kernel estimate from a large sample tracks the claimed density
    reg = load_registry()
    for m in reg.values():
        n = 40000
        pts = m.sample(n, 77)
        d = 2
        scale = (4.0 / (d + 4.0)) ** (2.0 / (d + 6.0)) * n ** (-2.0 / (d + 6.0))
        H = BandwidthMatrix(scale * np.cov(pts.T))
        lo, hi = m.base_rectangle()
        axes = [np.linspace(lo[k], hi[k], 20) for k in range(2)]
        mesh = np.meshgrid(*axes, indexing="ij")
        probes = np.stack(mesh, axis=-1).reshape(-1, 2)
        est = np.concatenate(
            [kde(probes[s : s + 50], pts, H) for s in range(0, len(probes), 50)]
        )
        mad = np.mean(np.abs(est - m.density(probes)))
        assert mad < m.extra["consistency_mad"], (m.name, mad)


def test_ideal_clustering_single_gaussian():
    model = MixtureModel(
        [MixtureComponent(1.0, [0.5, -0.25], [[1.0, 0.3], [0.3, 2.0]])],
        name="one",
        true_clusters=1,
    )
    grid = build_grid(model, resolution=40)
    ic = ideal_clustering(model, grid)
    assert ic.partition.n_clusters == 1
    assert np.allclose(ic.modes[0], [0.5, -0.25], atol=1e-3)
    assert ic.partition.metadata["dissolved_saddles"] == 0


def test_ideal_clustering_two_blobs():
    model = MixtureModel(
        [
            MixtureComponent(0.5, [-2.0, 0.0], 0.36 * np.eye(2)),
            MixtureComponent(0.5, [2.0, 0.0], 0.36 * np.eye(2)),
        ],
        name="pair",
        true_clusters=2,
    )
    grid = build_grid(model, resolution=48)
    ic = ideal_clustering(model, grid)
    part = ic.partition
    assert part.n_clusters == 2
    assert np.allclose(np.sort(ic.modes[:, 0]), [-2.0, 2.0], atol=1e-3)
    cm = part.cluster_masses()
    assert np.allclose(cm, [0.5, 0.5], atol=0.01)
    # the basin boundary sits within one spacing of the symmetry axis
    pts = grid.points()
    span = grid.spacings()[0]
    left = part.labels[pts[:, 0] < -span]
    right = part.labels[pts[:, 0] > span]
    assert len(np.unique(left)) == 1 and len(np.unique(right)) == 1
    assert left[0] != right[0]


def test_ideal_clustering_deterministic():
    reg = load_registry()
    model = reg["trimodal"]
    grid = build_grid(model, resolution=40)
    a = ideal_clustering(model, grid)
    b = ideal_clustering(model, grid)
    assert np.array_equal(a.partition.labels, b.partition.labels)
    assert np.array_equal(a.modes, b.modes)


def test_ideal_clustering_recovers_declared_counts():
    reg = load_registry()
    for name, m in reg.items():
        grid = build_grid(m, resolution=48)
        ic = ideal_clustering(m, grid)
        assert ic.partition.n_clusters == m.true_clusters, name


def test_ideal_count_stable_under_refinement():
    model = load_registry()["quadrimodal"]
    for res in (40, 64):
        grid = build_grid(model, resolution=res)
        assert ideal_clustering(model, grid).partition.n_clusters == 4


def test_model_validation():
    good = MixtureComponent(1.0, [0.0, 0.0], np.eye(2))
    with pytest.raises(ValidationError):
        MixtureModel([], name="empty")
    with pytest.raises(ValidationError):
        MixtureModel(
            [MixtureComponent(0.6, [0.0], [[1.0]]), MixtureComponent(0.6, [0.0], [[1.0]])]
        )
    with pytest.raises(ValidationError):
        MixtureModel(
            [
                MixtureComponent(0.5, [0.0], [[1.0]]),
                MixtureComponent(0.5, [0.0, 1.0], np.eye(2)),
            ]
        )
    with pytest.raises(ValidationError):
        RingSegment(1.0, [0.0, 0.0], 0.2, 0.0, 1.0, 0.1)  # radius too thin
    with pytest.raises(ValidationError):
        RingSegment(1.0, [0.0, 0.0], 2.0, 1.0, 1.0, 0.1)  # empty angle span
    with pytest.raises(ValidationError):
        RingSegmentModel([], name="no-segs")
    seg = RingSegment(0.5, [0.0, 0.0], 2.0, 0.0, 1.0, 0.1)
    with pytest.raises(ValidationError):
        RingSegmentModel([seg], blobs=[MixtureComponent(0.5, [0.0], [[1.0]])])
    assert good.weight == 1.0


def test_registry_validation(tmp_path):
    def write(doc):
        path = os.path.join(tmp_path, "reg.json")
        with open(path, "w") as fh:
            json.dump(doc, fh)
        return path

    with pytest.raises(ValidationError, match="models"):
        load_registry(write({"models": []}))
    entry = {
        "name": "m",
        "type": "mixture",
        "true_clusters": 1,
        "params": {"components": [{"weight": 1.0, "mean": [0.0, 0.0], "cov": [[1, 0], [0, 1]]}]},
    }
    with pytest.raises(ValidationError, match="duplicate"):
        load_registry(write({"models": [entry, entry]}))
    bad_type = dict(entry, name="x", type="widget")
    with pytest.raises(ValidationError, match="unknown type"):
        load_registry(write({"models": [bad_type]}))
    with pytest.raises(ValidationError, match="missing key"):
        load_registry(write({"models": [{"name": "y", "type": "mixture"}]}))
    path = os.path.join(tmp_path, "broken.json")
    with open(path, "w") as fh:
        fh.write("{not json")
    with pytest.raises(ValidationError, match="JSON"):
        load_registry(path)
    reg = load_registry(write({"models": [entry]}))
    assert list(reg) == ["m"]


def test_points_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    pts = rng.standard_normal((37, 2))
    path = os.path.join(tmp_path, "pts.csv")
    save_points(path, pts)
    back = load_points(path)
    assert np.array_equal(back, pts)

    with open(path, "w") as fh:
        fh.write("x1,x2\n1.0,2.0\n3.0,oops\n")
    with pytest.raises(ValidationError):
        load_points(path)
    with open(path, "w") as fh:
        fh.write("")
    with pytest.raises(ValidationError):
        load_points(path)
