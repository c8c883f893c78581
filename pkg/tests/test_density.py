import math

import numpy as np
import pytest
from scipy import integrate, stats

from shiftcp.density import (
    DEFAULT_GRID,
    BandwidthSearch,
    MAX_LOG_RATIO,
    LogisticConfig,
    cv_scores,
    fit_kde,
    fold_indices,
    kde_log_density,
    logistic_ratio_weights,
    ratio_weights,
    select_bandwidth,
)
from shiftcp.errors import InputError


def direct_density(samples, h, x):
    """Plain-space kernel sum, written out without log-sum-exp."""
    samples = np.atleast_2d(samples)
    n, d = samples.shape
    total = 0.0
    for s in samples:
        u = (np.asarray(x) - s) / h
        total += math.exp(-0.5 * float(u @ u)) / (2 * math.pi) ** (d / 2)
    return total / (n * h**d)


class TestFitKde:
    def test_single_kernel_at_center(self):
        model = fit_kde([[0.0]], 1.0)
        assert model.density([[0.0]])[0] == pytest.approx(0.3989422804014327, rel=1e-12)

    def test_symmetry(self):
        model = fit_kde([[-1.0], [1.0]], 0.7)
        for x in [0.1, 0.5, 2.3]:
            assert model.density([[x]])[0] == pytest.approx(model.density([[-x]])[0], rel=1e-14)

    def test_integrates_to_one(self):
        samples = np.random.default_rng(0).standard_normal((50, 1))
        model = fit_kde(samples, select_bandwidth(samples))
        grid = np.linspace(-10, 10, 20001)
        mass = integrate.trapezoid(model.density(grid[:, None]), grid)
        assert mass == pytest.approx(1.0, abs=1e-3)

    def test_integrates_to_one_2d(self):
        samples = np.random.default_rng(1).standard_normal((20, 2))
        model = fit_kde(samples, 0.6)
        g = np.linspace(-8, 8, 321)
        xx, yy = np.meshgrid(g, g)
        dens = model.density(np.column_stack([xx.ravel(), yy.ravel()])).reshape(xx.shape)
        mass = integrate.trapezoid(integrate.trapezoid(dens, g, axis=1), g)
        assert mass == pytest.approx(1.0, abs=1e-3)

    @pytest.mark.parametrize("h", [0.0, -1.0, np.nan])
    def test_bad_bandwidth(self, h):
        with pytest.raises(InputError):
            fit_kde([[0.0]], h)

    def test_non_finite_samples(self):
        with pytest.raises(InputError):
            fit_kde([[0.0], [np.inf]], 1.0)


class TestLogDensity:
    def test_matches_direct_evaluation(self):
        rng = np.random.default_rng(5)
        for d in (1, 2, 3):
            samples = rng.normal(size=(7, d))
            h = float(rng.uniform(0.3, 2.0))
            model = fit_kde(samples, h)
            for _ in range(5):
                x = rng.normal(size=d)
                got = math.exp(kde_log_density(model, x))
                assert got == pytest.approx(direct_density(samples, h, x), rel=1e-9)

    def test_far_query_is_finite(self):
        model = fit_kde([[0.0], [0.5]], 0.1)
        value = kde_log_density(model, [5.0 + 50 * 0.1])
        assert np.isfinite(value) and value < -1000

    def test_closed_form(self):
        assert kde_log_density(fit_kde([[0.0]], 1.0), [0.0]) == pytest.approx(-0.9189385332046727)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            kde_log_density(fit_kde([[0.0, 1.0]], 1.0), [0.0])

    def test_scale_covariance(self):
        rng = np.random.default_rng(2)
        samples, x = rng.normal(size=(30, 2)), rng.normal(size=(4, 2))
        base = fit_kde(samples, 0.5).density(x)
        for c in (0.1, 3.0, 40.0):
            scaled = fit_kde(samples * c, 0.5 * c).density(x * c)
            np.testing.assert_allclose(scaled, base * c**-2, rtol=1e-9)


class TestBandwidth:
    def test_default_grid(self):
        assert DEFAULT_GRID.size == 25
        assert DEFAULT_GRID[0] == pytest.approx(10**-1.3)
        assert DEFAULT_GRID[-1] == pytest.approx(10.0)
        assert BandwidthSearch().folds == 10

    def test_folds_are_a_partition(self):
        folds = fold_indices(23, 5, seed=4)
        assert [len(f) for f in folds] == [5, 5, 5, 4, 4]
        np.testing.assert_array_equal(np.sort(np.concatenate(folds)), np.arange(23))

    def test_single_candidate(self):
        samples = np.random.default_rng(0).normal(size=(20, 1))
        assert select_bandwidth(samples, BandwidthSearch(grid=[0.5], folds=4)) == 0.5

    def test_selected_value_attains_max(self):
        samples = np.random.default_rng(1).normal(size=(80, 2))
        search = BandwidthSearch(folds=5, seed=3)
        h = select_bandwidth(samples, search)
        scores = cv_scores(samples, search)
        assert h in search.grid
        assert scores[list(search.grid).index(h)] == scores.max()

    def test_cv_beats_grid_endpoints_in_l2(self):
        samples = np.random.default_rng(7).standard_normal((500, 1))
        grid = np.linspace(-8, 8, 4001)
        truth = stats.norm.pdf(grid)

        def l2(h):
            est = fit_kde(samples, h).density(grid[:, None])
            return integrate.trapezoid((est - truth) ** 2, grid)

        h = select_bandwidth(samples)
        assert l2(h) <= l2(DEFAULT_GRID[0])
        assert l2(h) <= l2(DEFAULT_GRID[-1])

    def test_too_few_samples(self):
        with pytest.raises(InputError):
            select_bandwidth(np.zeros((3, 1)), BandwidthSearch(folds=5))

    def test_bad_grid(self):
        with pytest.raises(InputError):
            BandwidthSearch(grid=[0.1, -1.0])

    def test_deterministic(self):
        samples = np.random.default_rng(1).normal(size=(60, 1))
        assert select_bandwidth(samples, BandwidthSearch(seed=9)) == \
            select_bandwidth(samples, BandwidthSearch(seed=9))


def test_kde_error_shrinks_with_n():
    truth = stats.norm(0, 1)
    grid = np.linspace(-3, 3, 61)[:, None]
    rng = np.random.default_rng(0)
    errs = []
    for n in (100, 500, 2000):
        samples = truth.rvs(size=(n, 1), random_state=rng)
        model = fit_kde(samples, select_bandwidth(samples))
        errs.append(np.mean(np.abs(model.density(grid) - truth.pdf(grid[:, 0]))))
    assert errs[1] < errs[0] * 1.2
    assert errs[2] < errs[1] * 1.2
    assert errs[2] < errs[0]


class TestRatioWeights:
    def test_identical_models_give_unit_weights(self):
        samples = np.random.default_rng(0).normal(size=(40, 2))
        kde = fit_kde(samples, 0.4)
        rw = ratio_weights(kde, fit_kde(samples.copy(), 0.4), samples)
        np.testing.assert_allclose(rw.cal_weights, 1.0, rtol=1e-9)
        np.testing.assert_allclose(rw.test_weight_of(samples[:3] + 0.1), 1.0, rtol=1e-9)

    def test_density_ratio_value(self):
        # a lone kernel evaluated at its centre has density 1 / (h sqrt(2 pi))
        h_test = 1.0 / (0.4 * math.sqrt(2 * math.pi))
        h_cal = 1.0 / (0.2 * math.sqrt(2 * math.pi))
        test_kde, cal_kde = fit_kde([[0.0]], h_test), fit_kde([[0.0]], h_cal)
        assert test_kde.density([[0.0]])[0] == pytest.approx(0.4)
        rw = ratio_weights(test_kde, cal_kde, [[0.0]])
        assert rw.cal_weights[0] == pytest.approx(2.0)

    def test_cap(self):
        test_kde = fit_kde([[0.0]], 1.0 / (50 * math.sqrt(2 * math.pi)))
        cal_kde = fit_kde([[0.0]], 1.0 / math.sqrt(2 * math.pi))
        assert ratio_weights(test_kde, cal_kde, [[0.0]]).cal_weights[0] == pytest.approx(50)
        assert ratio_weights(test_kde, cal_kde, [[0.0]], cap=10).cal_weights[0] == 10
        assert ratio_weights(test_kde, cal_kde, [[0.0]], cap=10).test_weight_of([[0.0]])[0] == 10

    def test_huge_ratio_saturates(self):
        test_kde, cal_kde = fit_kde([[100.0]], 1.0), fit_kde([[0.0]], 0.05)
        w = ratio_weights(test_kde, cal_kde, [[60.0]]).cal_weights
        assert np.isfinite(w[0]) and w[0] == pytest.approx(np.exp(MAX_LOG_RATIO))

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            ratio_weights(fit_kde([[0.0]], 1), fit_kde([[0.0, 0.0]], 1), [[0.0]])

    def test_converges_to_true_ratio(self):
        p, q = stats.norm(0.5, 1.0), stats.norm(0.0, 1.0)
        grid = np.linspace(-1.0, 1.5, 26)[:, None]
        true = p.pdf(grid[:, 0]) / q.pdf(grid[:, 0])
        errs = {}
        for n in (200, 2000):
            e = []
            for seed in range(3):
                rng = np.random.default_rng(seed)
                xp, xq = p.rvs((n, 1), random_state=rng), q.rvs((n, 1), random_state=rng)
                rw = ratio_weights(fit_kde(xp, select_bandwidth(xp)),
                                   fit_kde(xq, select_bandwidth(xq)), grid)
                e.append(np.mean(np.abs(rw.cal_weights - true)))
            errs[n] = np.mean(e)
        # halving, with 20% slack for sampling noise
        assert errs[2000] <= 0.5 * errs[200] * 1.2


class TestLogisticWeights:
    def test_same_distribution(self):
        rng = np.random.default_rng(0)
        cal, test = rng.normal(size=(2000, 2)), rng.normal(size=(2000, 2))
        rw = logistic_ratio_weights(cal, test)
        assert 0.8 <= rw.cal_weights.mean() <= 1.25
        assert rw.converged

    def test_separated_sets_hit_cap(self):
        rng = np.random.default_rng(1)
        cal = rng.normal(-5, 0.5, size=(100, 1))
        test = rng.normal(5, 0.5, size=(100, 1))
        rw = logistic_ratio_weights(cal, test, LogisticConfig(cap=100))
        assert rw.cal_weights.max() < 1e-2
        assert np.all(rw.test_weight_of(test) > 90)

    def test_duplicated_point(self):
        rw = logistic_ratio_weights([[1.0, 2.0]], [[1.0, 2.0]])
        assert rw.cal_weights[0] == pytest.approx(1.0)

    def test_shape_checks(self):
        with pytest.raises(InputError):
            logistic_ratio_weights(np.zeros((0, 2)), np.zeros((3, 2)))
        with pytest.raises(InputError):
            logistic_ratio_weights(np.zeros((2, 2)), np.zeros((3, 1)))
