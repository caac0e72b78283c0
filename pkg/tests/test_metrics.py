import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cutflow.metrics import (
    ReplicateReport,
    clr,
    crps,
    grid_kl,
    interval_score,
    point_metrics,
    wasserstein1_1d,
    wasserstein2_1d,
)


def crps_double_sum(samples, y):
    """Brute-force reference: the definition evaluated literally."""
    x = np.asarray(samples, dtype=np.float64)
    m = x.size
    first = np.mean(np.abs(x - y))
    second = np.sum(np.abs(x[:, None] - x[None, :])) / (2.0 * m * m)
    return first - second


class TestCrps:
    def test_point_mass_at_truth_is_zero(self):
        assert crps(np.full(50, 3.2), 3.2) == pytest.approx(0.0, abs=1e-12)

    def test_hand_evaluated_pair(self):
        assert crps(np.array([0.0, 2.0]), 1.0) == pytest.approx(0.5, abs=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(200)
        base = crps(x, 0.3)
        assert crps(x + 17.0, 17.3) == pytest.approx(base, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_sorted_identity_matches_double_sum(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(rng.integers(1, 40))
        y = rng.standard_normal()
        assert crps(x, y) == pytest.approx(crps_double_sum(x, y), abs=1e-10)

    def test_positive_homogeneity(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(100)
        assert crps(3.0 * x, 3.0 * 0.4) == pytest.approx(3.0 * crps(x, 0.4), abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            crps(np.array([]), 0.0)


def samples_with_quantiles(lo, hi, m=81, alpha=0.05):
    """A sorted sample whose type-7 alpha/2 and 1-alpha/2 quantiles are
    exactly lo and hi: with m = 81 those quantile positions are the integer
    order statistics 2 and 78, so pin them there."""
    k_lo = int(alpha / 2 * (m - 1))
    k_hi = int((1 - alpha / 2) * (m - 1))
    assert np.isclose(alpha / 2 * (m - 1), k_lo)
    assert np.isclose((1 - alpha / 2) * (m - 1), k_hi)
    below = lo - 1.0 - np.arange(k_lo)[::-1]
    interior = np.linspace(lo, hi, k_hi - k_lo + 1)
    above = hi + 1.0 + np.arange(m - 1 - k_hi)
    return np.concatenate([below, interior, above])


class TestIntervalScore:
    def test_inside_interval_is_width(self):
        x = samples_with_quantiles(-1.0, 1.0)
        assert interval_score(x, 0.0) == pytest.approx(2.0, abs=1e-12)

    def test_hand_evaluated_penalty_case(self):
        x = samples_with_quantiles(-1.96, 1.96)
        score = interval_score(x, 3.0, alpha=0.05)
        assert score == pytest.approx(3.92 + 40.0 * 1.04, abs=1e-9)
        assert score == pytest.approx(45.52, abs=1e-9)

    def test_degenerate_samples_at_truth(self):
        assert interval_score(np.full(30, 1.5), 1.5) == pytest.approx(0.0, abs=1e-12)

    def test_needs_twenty_samples(self):
        with pytest.raises(ValueError):
            interval_score(np.zeros(19), 0.0)

    def test_translation_and_scale(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(400)
        s = interval_score(x, 0.7)
        assert interval_score(x + 3, 3.7) == pytest.approx(s, abs=1e-9)
        assert interval_score(2 * x, 1.4) == pytest.approx(2 * s, abs=1e-9)


class TestPointMetrics:
    def test_centered_sample(self):
        x = np.concatenate([np.linspace(-1, 1, 100)])
        mse, covered = point_metrics(x, 0.0)
        assert mse == pytest.approx(0.0, abs=1e-12)
        assert covered

    def test_offset_sample(self):
        mse, covered = point_metrics(np.full(50, 2.0), 1.0)
        assert mse == pytest.approx(1.0)
        assert not covered

    def test_nominal_coverage_rate(self):
        rng = np.random.default_rng(3)
        hits = [point_metrics(rng.standard_normal(400), 0.0)[1] for _ in range(50)]
        assert 0.85 <= np.mean(hits) <= 1.0


class TestWasserstein:
    def test_identical_sets_zero(self):
        x = np.random.default_rng(4).standard_normal(100)
        assert wasserstein2_1d(x, x.copy()) == 0.0
        assert wasserstein1_1d(x, x.copy()) == 0.0

    def test_shift_is_distance(self):
        x = np.random.default_rng(5).standard_normal(128)
        assert wasserstein2_1d(x, x + 0.75) == pytest.approx(0.75, abs=1e-12)
        assert wasserstein1_1d(x, x - 1.25) == pytest.approx(1.25, abs=1e-12)

    def test_hand_evaluated_pair(self):
        assert wasserstein2_1d([0.0, 1.0], [0.0, 2.0]) == pytest.approx(0.70711, abs=1e-5)

    def test_unequal_sizes_resampled(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal(5001)
        y = rng.standard_normal(2000) + 1.0
        assert wasserstein2_1d(x, y) == pytest.approx(1.0, abs=0.1)

    def test_metric_properties_on_random_triples(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            a, b, c = (rng.standard_normal(64) * rng.uniform(0.5, 2) + rng.uniform(-1, 1)
                       for _ in range(3))
            dab = wasserstein2_1d(a, b)
            dba = wasserstein2_1d(b, a)
            assert dab == pytest.approx(dba, abs=1e-12)
            assert dab <= wasserstein2_1d(a, c) + wasserstein2_1d(c, b) + 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            wasserstein2_1d([], [1.0])


class TestClr:
    def test_uniform_is_zero(self):
        np.testing.assert_allclose(clr(np.ones(4) / 4), 0.0, atol=1e-12)

    def test_components_sum_to_zero(self):
        rng = np.random.default_rng(8)
        p = rng.dirichlet(np.ones(5), size=50)
        out = clr(p)
        np.testing.assert_allclose(out.sum(axis=1), 0.0, atol=1e-12)

    def test_hand_evaluated_values(self):
        out = clr(np.array([0.5, 0.25, 0.25]))
        np.testing.assert_allclose(out, [0.46210, -0.23105, -0.23105], atol=1e-5)

    def test_zero_component_rejected(self):
        with pytest.raises(ValueError):
            clr(np.array([0.5, 0.5, 0.0]))


class TestGridKl:
    def test_identical_grids_zero(self):
        from scipy.stats import norm
        grid = np.linspace(-5, 5, 501)
        dens = norm.pdf(grid)
        assert grid_kl(dens, dens.copy(), grid[1] - grid[0]) == pytest.approx(0.0, abs=1e-14)

    def test_gaussian_shift_analytic_value(self):
        from scipy.stats import norm
        grid = np.arange(-10, 10 + 1e-12, 0.01)
        q = norm.pdf(grid)
        p = norm.pdf(grid, 0.5, 1.0)
        assert grid_kl(q, p, 0.01) == pytest.approx(0.125, abs=1e-3)

    def test_nonnegative_on_random_density_pairs(self):
        rng = np.random.default_rng(9)
        grid = np.linspace(-6, 6, 401)
        for _ in range(100):
            def bump():
                mu, sd = rng.uniform(-2, 2), rng.uniform(0.5, 2)
                return np.exp(-0.5 * ((grid - mu) / sd) ** 2) / sd
            q = bump() + 0.3 * bump()
            p = bump() + 0.3 * bump()
            assert grid_kl(q, p, grid[1] - grid[0]) >= -1e-12

    def test_zero_iff_proportional(self):
        grid = np.linspace(0, 1, 101)
        q = np.ones(101)
        assert grid_kl(q, 7.3 * q, 0.01) == pytest.approx(0.0, abs=1e-10)

    def test_support_violation_reports_index(self):
        q = np.array([0.0, 1.0, 1.0, 0.0])
        p = np.array([1.0, 1.0, 0.0, 1.0])
        with pytest.raises(ValueError, match="index 2"):
            grid_kl(q, p, 0.1)


class TestReplicateReport:
    def test_aggregation_layout(self):
        report = ReplicateReport("toy", replicates=3)
        for value, hit in [(1.0, True), (3.0, False), (2.0, True)]:
            report.add("method_a", "interval_score", value)
            report.add("method_a", "covered", hit)
        agg = report.aggregate()
        assert agg["method_a"]["interval_score"]["median"] == 2.0
        assert agg["method_a"]["coverage"] == pytest.approx(2 / 3)

    def test_json_is_deterministic_and_excludes_timings(self):
        def build():
            r = ReplicateReport("toy", replicates=2)
            r.add("m", "crps", 0.5)
            r.add("m", "crps", 0.25)
            r.add_timing("m", np.random.default_rng().uniform())
            return r

        j1, j2 = build().to_json(), build().to_json()
        assert j1 == j2
        assert "seconds" not in j1
        parsed = json.loads(j1)
        assert parsed["metrics"]["m"]["crps"]["median"] == 0.375
