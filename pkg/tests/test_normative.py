import math
from itertools import product

import numpy as np
import pytest
from scipy import integrate, stats

from smtgpr.model import PredictiveDistribution
from smtgpr.normative import (
    GevdFit,
    NormativeError,
    NpmMatrix,
    abnormality_probability,
    abnormality_score,
    auc,
    compute_npm,
    fit_gevd,
    gev_cdf,
    r_squared,
)


def brute_auc(neg, pos):
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg))
    return total / (len(pos) * len(neg))


def brute_score(row, f, trim=0.1):
    mags = sorted((abs(v) for v in row if np.isfinite(v)), reverse=True)
    k = max(1, math.ceil(f * len(mags) - 1e-9))
    sel = mags[:k]
    cut = int(trim * k)
    kept = sel[cut : k - cut]
    return sum(kept) / len(kept)


def brute_r2(y, yp):
    out = []
    for j in range(y.shape[1]):
        m = sum(y[:, j]) / y.shape[0]
        sse = sum((a - b) ** 2 for a, b in zip(y[:, j], yp[:, j]))
        sst = sum((a - m) ** 2 for a in y[:, j])
        out.append(1.0 - sse / sst)
    return np.array(out)


class TestNpm:
    def test_unit_example(self):
        pred = PredictiveDistribution(np.zeros((1, 1)), np.full((1, 1), 0.5), 0.5)
        assert compute_npm([[1.0]], pred).values[0, 0] == pytest.approx(1.0)

    def test_perfect_prediction_gives_zero(self, rng):
        y = rng.standard_normal((4, 5))
        pred = PredictiveDistribution(y.copy(), np.ones_like(y), 0.1)
        assert np.all(compute_npm(y, pred).values == 0.0)

    def test_scalar_recomputation(self, rng):
        y = rng.standard_normal((3, 4))
        mean = rng.standard_normal((3, 4))
        var = rng.uniform(0.1, 2, (3, 4))
        noise = rng.uniform(0.1, 1, 4)
        npm = compute_npm(y, PredictiveDistribution(mean, var, noise)).values
        for i, j in product(range(3), range(4)):
            assert npm[i, j] == pytest.approx((y[i, j] - mean[i, j]) / math.sqrt(var[i, j] + noise[j]), rel=1e-15)

    def test_nan_tasks_are_masked(self, rng):
        mean = rng.standard_normal((3, 4))
        mean[:, 2] = np.nan
        npm = compute_npm(np.zeros((3, 4)), PredictiveDistribution(mean, np.ones((3, 4)), 1.0))
        assert npm.masked_tasks == 1

    def test_zero_variance_rejected(self):
        with pytest.raises(NormativeError):
            compute_npm([[1.0]], PredictiveDistribution(np.zeros((1, 1)), np.zeros((1, 1)), 0.0))

    def test_shape_mismatch(self):
        with pytest.raises(NormativeError):
            compute_npm(np.zeros((2, 2)), PredictiveDistribution(np.zeros((2, 3)), np.ones((2, 3)), 1.0))


class TestAbnormalityScore:
    def test_constant_row(self):
        assert abnormality_score(np.full((1, 40), -2.5))[0] == pytest.approx(2.5)

    def test_single_spike(self):
        row = np.zeros((1, 20))
        row[0, 7] = -9.0
        assert abnormality_score(row, 0.05)[0] == 9.0

    @pytest.mark.parametrize("mode", ["trimmed", "mean"])
    def test_matches_brute_force(self, rng, mode):
        for _ in range(50):
            t = int(rng.integers(1, 80))
            f = float(rng.uniform(1.0 / t, 1.0))
            npm = rng.standard_normal((3, t))
            trim = 0.1 if mode == "trimmed" else 0.0
            expected = [brute_score(r, f, trim) for r in npm]
            assert np.allclose(abnormality_score(npm, f, mode=mode), expected, rtol=1e-12, atol=0)

    def test_median(self, rng):
        npm = rng.standard_normal((2, 40))
        got = abnormality_score(npm, 0.25, mode="median")
        top = -np.sort(-np.abs(npm), axis=1)[:, :10]
        assert np.allclose(got, np.median(top, axis=1))

    def test_sign_invariance(self, rng):
        npm = rng.standard_normal((5, 60))
        flip = rng.choice([-1.0, 1.0], npm.shape)
        assert np.array_equal(abnormality_score(npm), abnormality_score(npm * flip))

    def test_nan_skipped(self, rng):
        npm = rng.standard_normal((2, 30))
        masked = npm.copy()
        masked[:, [3, 9]] = np.nan
        expected = [brute_score(r, 0.1) for r in masked]
        assert np.allclose(abnormality_score(NpmMatrix(masked), 0.1), expected, rtol=1e-12)

    def test_errors(self):
        with pytest.raises(NormativeError):
            abnormality_score(np.full((1, 5), np.nan), 0.5)
        with pytest.raises(NormativeError):
            abnormality_score(np.zeros((1, 10)), 0.05)
        with pytest.raises(NormativeError):
            abnormality_score(np.zeros((1, 10)), 0.0)
        with pytest.raises(NormativeError):
            abnormality_score(np.zeros((1, 10)), 0.5, mode="winsor")


class TestGev:
    def test_gumbel_cdf_at_location(self):
        assert gev_cdf(0.0, 0.0, 0.0, 1.0) == pytest.approx(math.exp(-1.0))

    def test_limits(self):
        assert gev_cdf(-1e300, 0.0, 0.0, 1.0) == 0.0
        assert gev_cdf(-50.0, 0.3, 0.0, 1.0) == 0.0
        assert gev_cdf(50.0, -0.3, 0.0, 1.0) == 1.0

    @pytest.mark.parametrize("xi", [-0.3, 0.0, 0.25])
    def test_cdf_matches_scipy_and_integral(self, xi):
        x = np.linspace(-2, 4, 25)
        ref = stats.genextreme(c=-xi, loc=0.5, scale=1.3)
        assert np.allclose(gev_cdf(x, xi, 0.5, 1.3), ref.cdf(x), atol=1e-12)
        lo = ref.ppf(1e-14)
        for point in (0.0, 1.0, 2.5):
            area, _ = integrate.quad(ref.pdf, lo, point)
            assert gev_cdf(point, xi, 0.5, 1.3) == pytest.approx(area, abs=1e-8)

    def test_cdf_monotone(self):
        x = np.linspace(-10, 10, 2001)
        for xi in (-0.5, 0.0, 0.5):
            assert np.all(np.diff(gev_cdf(x, xi, 0.0, 1.0)) >= 0)

    def test_gumbel_recovery(self):
        x = stats.gumbel_r(loc=0, scale=1).rvs(10_000, random_state=np.random.default_rng(0))
        fit = fit_gevd(x)
        assert abs(fit.shape) < 0.1 and abs(fit.location) < 0.1 and abs(fit.scale - 1) < 0.1
        assert np.isfinite(fit.log_likelihood) and fit.n == 10_000

    def test_matches_scipy_mle(self, rng):
        x = stats.genextreme(c=-0.15, loc=1.0, scale=0.5).rvs(500, random_state=rng)
        fit = fit_gevd(x)
        c, loc, scale = stats.genextreme.fit(x)
        ours = -np.sum(stats.genextreme.logpdf(x, -fit.shape, fit.location, fit.scale))
        theirs = -np.sum(stats.genextreme.logpdf(x, c, loc, scale))
        assert ours <= theirs + 1e-6
        assert fit.log_likelihood == pytest.approx(-ours, rel=1e-9)

    def test_affine_equivariance(self, rng):
        x = stats.gumbel_r.rvs(size=400, random_state=rng)
        a, b = 3.5, -2.0
        f1 = fit_gevd(x)
        f2 = fit_gevd(a * x + b)
        assert f2.shape == pytest.approx(f1.shape, abs=1e-3)
        assert f2.location == pytest.approx(a * f1.location + b, rel=1e-4, abs=1e-4)
        assert f2.scale == pytest.approx(a * f1.scale, rel=1e-4)

    def test_degenerate_inputs(self):
        with pytest.raises(NormativeError):
            fit_gevd(np.ones(50))
        with pytest.raises(NormativeError):
            fit_gevd(np.arange(5.0))

    def test_probability_ranking_preserves_auc(self, rng):
        normal = stats.gumbel_r.rvs(size=60, random_state=rng)
        abnormal = stats.gumbel_r.rvs(loc=1.0, size=40, random_state=rng)
        fit = fit_gevd(normal)
        pn = abnormality_probability(fit, normal)
        pa = abnormality_probability(fit, abnormal)
        assert np.all((pn >= 0) & (pn <= 1))
        # CDF saturation can create ties the raw scores do not have
        if len(np.unique(np.concatenate([pn, pa]))) == 100:
            assert auc(pn, pa) == pytest.approx(auc(normal, abnormal), abs=1e-15)
        assert isinstance(fit, GevdFit)


class TestAuc:
    def test_examples(self):
        assert auc([0, 0.1], [0.9, 1.0]) == 1.0
        assert auc([1.0, 1.0], [1.0, 1.0, 1.0]) == 0.5

    def test_brute_force(self, rng):
        for _ in range(30):
            neg = np.round(rng.standard_normal(int(rng.integers(1, 30))), 1)
            pos = np.round(rng.standard_normal(int(rng.integers(1, 30))) + 0.5, 1)
            assert abs(auc(neg, pos) - brute_auc(neg, pos)) <= 1e-12

    def test_monotone_transform_invariance(self, rng):
        neg, pos = rng.standard_normal(30), rng.standard_normal(20) + 1
        assert auc(np.exp(neg), np.exp(pos)) == auc(neg, pos)

    def test_errors(self):
        with pytest.raises(NormativeError):
            auc([], [1.0])
        with pytest.raises(NormativeError):
            auc([np.nan], [1.0])


class TestRSquared:
    def test_perfect_and_mean(self, rng):
        y = rng.standard_normal((10, 3))
        assert np.allclose(r_squared(y, y).per_task, 1.0)
        assert np.allclose(r_squared(y, np.tile(y.mean(axis=0), (10, 1))).per_task, 0.0, atol=1e-15)

    def test_formula(self, rng):
        y = rng.standard_normal((12, 4))
        yp = y + 0.5 * rng.standard_normal((12, 4))
        res = r_squared(y, yp)
        assert np.allclose(res.per_task, brute_r2(y, yp), rtol=0, atol=1e-12)
        assert res.mean == pytest.approx(np.mean(res.per_task))

    def test_shift_invariance(self, rng):
        y = rng.standard_normal((12, 4))
        yp = y + rng.standard_normal((12, 4))
        shift = rng.standard_normal(4) * 10
        assert np.allclose(r_squared(y + shift, yp + shift).per_task, r_squared(y, yp).per_task, atol=1e-12)

    def test_masking(self, rng):
        y = rng.standard_normal((6, 3))
        y[:, 1] = 2.0
        yp = y + 0.1
        yp[:, 2] = np.nan
        res = r_squared(y, yp)
        assert res.masked == 2
        assert res.mean == res.per_task[0]
