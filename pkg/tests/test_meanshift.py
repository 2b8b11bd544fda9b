"""Mean shift iteration tests: fixed points, ascent, merging, equivariance."""

import numpy as np
import pytest

from mslab import BandwidthMatrix, NumericalError, rescaled_kernel
from mslab.meanshift import (
    MeanShiftConfig,
    cluster,
    converge,
    kde,
    kde_gradient,
    mean_shift_step,
)


def random_spd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T + d * np.eye(d))


def two_blob_sample(rng, n=60, sep=6.0):
    half = n // 2
    a = rng.standard_normal((half, 2)) * 0.5 + [0.0, 0.0]
    b = rng.standard_normal((n - half, 2)) * 0.5 + [sep, 0.0]
    return np.vstack([a, b])


class TestKde:
    def test_single_data_point_is_rescaled_kernel(self):
        h = BandwidthMatrix([[1.0, 0.2], [0.2, 0.5]])
        x = np.array([0.7, -0.4])
        datum = np.array([[0.1, 0.3]])
        assert kde(x, datum, h) == pytest.approx(
            rescaled_kernel(x - datum[0], h), rel=1e-12
        )

    def test_batch_matches_single(self):
        rng = np.random.default_rng(10)
        data = rng.standard_normal((40, 2))
        h = BandwidthMatrix(random_spd(rng, 2, 0.3))
        pts = rng.standard_normal((15, 2))
        batch = kde(pts, data, h)
        for i, p in enumerate(pts):
            assert batch[i] == pytest.approx(kde(p, data, h), rel=1e-12)

    def test_integrates_to_one(self):
        rng = np.random.default_rng(11)
        data = rng.standard_normal((50, 2))
        h = BandwidthMatrix(0.3 * np.eye(2))
        nodes, weights = np.polynomial.legendre.leggauss(90)
        lo, hi = data.min() - 5.0, data.max() + 5.0
        xs = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        ws = 0.5 * (hi - lo) * weights
        xx, yy = np.meshgrid(xs, xs, indexing="ij")
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        vals = kde(pts, data, h).reshape(xx.shape)
        mass = np.einsum("i,j,ij->", ws, ws, vals)
        assert mass == pytest.approx(1.0, abs=2e-2)


class TestKdeGradient:
    def test_zero_at_single_data_point(self):
        h = BandwidthMatrix(np.eye(2))
        grad = kde_gradient([0.3, 0.4], np.array([[0.3, 0.4]]), h)
        assert np.allclose(grad, 0.0, atol=1e-14)

    def test_against_finite_differences(self):
        rng = np.random.default_rng(12)
        data = rng.standard_normal((30, 2))
        h = BandwidthMatrix(random_spd(rng, 2, 0.4))
        for _ in range(20):
            x = rng.standard_normal(2)
            grad = kde_gradient(x, data, h)
            fd = np.empty(2)
            step = 1e-5
            for k in range(2):
                xp, xm = x.copy(), x.copy()
                xp[k] += step
                xm[k] -= step
                fd[k] = (kde(xp, data, h) - kde(xm, data, h)) / (2.0 * step)
            assert np.allclose(grad, fd, rtol=1e-6, atol=1e-12)


class TestMeanShiftStep:
    def test_single_datum_is_absorbing(self):
        h = BandwidthMatrix(np.eye(2))
        datum = np.array([[1.5, -2.0]])
        nxt = mean_shift_step([1.0, -1.0], datum, h)
        assert np.array_equal(nxt, datum[0])

    def test_symmetric_pair_keeps_axis(self):
        h = BandwidthMatrix(np.eye(2))
        data = np.array([[1.0, 0.0], [-1.0, 0.0]])
        nxt = mean_shift_step([0.0, 0.5], data, h)
        assert nxt[0] == pytest.approx(0.0, abs=1e-14)

    def test_two_routes_agree(self):
        # Weighted-mean form vs y + H Dfhat(y) / fhat(y), plus a by-hand
        # assembly of the weights from kernel values.
        rng = np.random.default_rng(13)
        data = rng.standard_normal((5, 2)) * 2.0
        h = BandwidthMatrix([[0.8, 0.3], [0.3, 1.1]])
        y = np.array([0.4, -0.2])
        got = mean_shift_step(y, data, h)

        w = np.array([rescaled_kernel(y - x, h) for x in data])
        by_hand = (w[:, None] * data).sum(axis=0) / w.sum()
        assert np.allclose(got, by_hand, rtol=1e-12)

        gradient_form = y + h.matrix @ kde_gradient(y, data, h) / kde(y, data, h)
        assert np.allclose(got, gradient_form, rtol=1e-12)

    def test_affine_equivariance(self):
        rng = np.random.default_rng(14)
        data = rng.standard_normal((25, 2))
        h = BandwidthMatrix(random_spd(rng, 2, 0.5))
        y = np.array([0.3, 0.1])
        for _ in range(10):
            s = rng.standard_normal((2, 2)) + 2.0 * np.eye(2)
            t = rng.standard_normal(2)
            hs = BandwidthMatrix(s @ h.matrix @ s.T)
            lhs = mean_shift_step(y @ s.T + t, data @ s.T + t, hs)
            rhs = mean_shift_step(y, data, h) @ s.T + t
            assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-9)

    def test_density_floor_error_names_point(self):
        h = BandwidthMatrix(0.01 * np.eye(2))
        data = np.zeros((5, 2))
        with pytest.raises(NumericalError) as err:
            mean_shift_step([500.0, 500.0], data, h)
        assert "500.0" in str(err.value)


class TestConverge:
    def test_two_point_example(self):
        # h = 0.6 makes the two-point kde unimodal (separation < 2h), so the
        # trajectory contracts linearly onto the central mode.
        h = BandwidthMatrix.scalar(0.36, 2)
        data = np.array([[0.0, 0.0], [1.0, 0.0]])
        res = converge([2.0, 0.0], data, h)
        assert res.converged
        assert res.ascent_ok
        assert 0.0 < res.mode[0] < 1.0
        assert res.mode[1] == pytest.approx(0.0, abs=1e-12)
        assert len(res.densities) == res.iterations + 1
        assert np.all(np.diff(res.densities) >= -1e-10 * res.densities[:-1])

    def test_ascent_on_random_problems(self):
        rng = np.random.default_rng(15)
        for _ in range(25):
            data = two_blob_sample(rng, n=40, sep=rng.uniform(1.0, 5.0))
            h = BandwidthMatrix(random_spd(rng, 2, rng.uniform(0.05, 1.0)))
            start = data[rng.integers(0, 40)] + rng.standard_normal(2)
            res = converge(start, data, h)
            assert res.ascent_ok
            assert np.all(np.diff(res.densities) >= -1e-10 * res.densities[:-1])

    def test_max_iter_flag(self):
        rng = np.random.default_rng(16)
        data = two_blob_sample(rng)
        h = BandwidthMatrix(np.eye(2))
        res = converge(data[0] + 3.0, data, h, MeanShiftConfig(max_iter=2))
        assert not res.converged
        assert res.iterations == 2


class TestCluster:
    def test_two_blobs_two_modes(self):
        rng = np.random.default_rng(17)
        data = two_blob_sample(rng, n=80)
        h = BandwidthMatrix.scalar(0.5, 2)
        res = cluster(data, data, h)
        assert res.n_modes == 2
        assert res.labels[0] == 0  # first occurrence labels the first query 0
        assert np.all(res.converged)
        assert np.all(res.ascent_ok)
        # points near each center share a label
        left = data[:, 0] < 3.0
        assert len(set(res.labels[left])) == 1
        assert len(set(res.labels[~left])) == 1

    def test_modes_are_fixed_points(self):
        rng = np.random.default_rng(18)
        data = two_blob_sample(rng, n=60)
        h = BandwidthMatrix.scalar(0.4, 2)
        res = cluster(data, data, h)
        cfg = MeanShiftConfig()
        for mode in res.modes:
            nxt = mean_shift_step(mode, data, h)
            from mslab import mahalanobis

            assert mahalanobis(nxt, mode, h) < cfg.merge_tol**2

    def test_merge_monotone_in_tolerance(self):
        rng = np.random.default_rng(19)
        for _ in range(5):
            data = two_blob_sample(rng, n=50, sep=rng.uniform(1.5, 4.0))
            h = BandwidthMatrix(random_spd(rng, 2, 0.2))
            for tol in (1e-3, 1e-2, 1e-1):
                a = cluster(data, data, h, MeanShiftConfig(merge_tol=tol))
                b = cluster(data, data, h, MeanShiftConfig(merge_tol=2 * tol))
                assert b.n_modes <= a.n_modes

    def test_query_order_invariance(self):
        rng = np.random.default_rng(20)
        data = two_blob_sample(rng, n=60)
        query = rng.standard_normal((30, 2)) * 2.0 + [3.0, 0.0]
        h = BandwidthMatrix.scalar(0.6, 2)
        base = cluster(query, data, h)
        perm = rng.permutation(30)
        shuffled = cluster(query[perm], data, h)
        # same partition of the query set, labels canonical on each side
        for i in range(30):
            for j in range(30):
                same_a = base.labels[perm[i]] == base.labels[perm[j]]
                same_b = shuffled.labels[i] == shuffled.labels[j]
                assert same_a == same_b
        assert np.allclose(
            np.sort(base.modes, axis=0), np.sort(shuffled.modes, axis=0), atol=1e-10
        )

    def test_translation_equivariance(self):
        rng = np.random.default_rng(21)
        data = two_blob_sample(rng, n=40)
        h = BandwidthMatrix.scalar(0.5, 2)
        t = np.array([12.0, -7.0])
        a = cluster(data, data, h)
        b = cluster(data + t, data + t, h)
        assert np.array_equal(a.labels, b.labels)
        assert np.allclose(a.modes + t, b.modes, atol=1e-8)

    def test_low_density_flagging(self):
        rng = np.random.default_rng(22)
        data = rng.standard_normal((30, 2)) * 0.3
        h = BandwidthMatrix.scalar(0.05, 2)
        query = np.vstack([data[:3], [[50.0, 50.0]]])
        res = cluster(query, data, h)
        assert not res.low_density[0]
        assert res.low_density[-1]
        assert res.labels.shape == (4,)  # batch never aborts
