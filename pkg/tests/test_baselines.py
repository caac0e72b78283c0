import numpy as np
import pytest
from scipy.stats import kstest

from cutflow.baselines import (
    GaussianVAFamily,
    MCMCConfig,
    analytic_gaussian_bias,
    dirichlet_parametric_cut,
    full_bayes_mcmc,
    gaussian_va_cut,
    nested_mcmc_cut,
    rw_metropolis,
)
from cutflow.engine import DownstreamModel, TrainConfig, UpstreamSamples
from cutflow import ops


class TestRwMetropolis:
    def test_uphill_proposals_always_accepted(self):
        # a target so steep that alpha is 1 uphill and ~0 downhill: the chain
        # must be monotone nondecreasing
        steep = 1e8
        config = MCMCConfig(warmup=50, kept=200, init_scale=0.1, seed=0)
        chain, _ = rw_metropolis(lambda x: steep * x[0], np.zeros(1), config)
        assert np.all(np.diff(chain[:, 0]) >= 0)
        assert chain[-1, 0] > chain[0, 0]

    def test_standard_normal_moments(self):
        config = MCMCConfig(warmup=2000, kept=50_000, seed=1)
        chain, rate = rw_metropolis(lambda x: -0.5 * x[0] ** 2, np.zeros(1), config)
        assert abs(chain.mean()) < 0.05
        assert abs(chain.var() - 1.0) < 0.05
        assert 0.2 < rate < 0.5

    def test_same_seed_identical_chains(self):
        config = MCMCConfig(warmup=100, kept=500, seed=7)
        c1, _ = rw_metropolis(lambda x: -0.5 * np.sum(x ** 2), np.zeros(2), config)
        c2, _ = rw_metropolis(lambda x: -0.5 * np.sum(x ** 2), np.zeros(2), config)
        assert np.array_equal(c1, c2)

    def test_nonfinite_init_rejected(self):
        config = MCMCConfig(seed=0)
        with pytest.raises(ValueError, match="init"):
            rw_metropolis(lambda x: -np.inf, np.zeros(1), config)

    def test_acceptance_stationary_after_warmup(self):
        # the adapted scale is frozen after warmup, so acceptance statistics
        # in the two post-warmup halves should agree
        config = MCMCConfig(warmup=3000, kept=30_000, seed=3)
        rng_probe = {}

        def target(x):
            return -0.5 * np.sum(x ** 2)

        chain, _ = rw_metropolis(target, np.zeros(2), config)
        moves1 = np.mean(np.any(np.diff(chain[:15_000], axis=0) != 0, axis=1))
        moves2 = np.mean(np.any(np.diff(chain[15_000:], axis=0) != 0, axis=1))
        assert abs(moves1 - moves2) < 0.03


def gaussian_bias_setup(seed=0, n_upstream=60):
    from cutflow.models import ExperimentSpec, make_builtin_model, simulate, upstream_samples

    spec = ExperimentSpec("gaussian_bias", seed=seed)
    dataset = simulate(spec)
    model = make_builtin_model("gaussian_bias", dataset)
    upstream = upstream_samples("gaussian_bias", dataset, n_upstream, seed=seed)
    post = analytic_gaussian_bias(
        (dataset.data["z"].sum(), dataset.data["w"].sum(),
         dataset.data["z"].size, dataset.data["w"].size), (1.0, 100.0))
    return model, upstream, post


class TestNestedMcmc:
    def test_gaussian_bias_pooled_moments_match_closed_form(self):
        model, upstream, post = gaussian_bias_setup(seed=2, n_upstream=80)
        config = MCMCConfig(warmup=400, kept=150, seed=4)
        draws = nested_mcmc_cut(model, upstream, config)
        assert draws.n == 80 * 150
        pooled = draws.theta[:, 0]
        # compare against the closed-form mixture moments for THIS upstream set
        cond_means = post.cond_intercept + post.cond_slope * upstream.matrix[:, 0]
        want_mean = cond_means.mean()
        want_var = post.cond_var + cond_means.var()
        assert pooled.mean() == pytest.approx(want_mean, abs=0.01)
        assert pooled.var() == pytest.approx(want_var, rel=0.15)

    def test_constant_likelihood_recovers_prior(self):
        def flat_lik(theta, eta, units=None):
            return np.zeros(ops.values(theta).shape[0])

        def prior(theta, eta):
            out = -0.5 * ops.square(theta)
            return ops.sum_(out, axis=1)

        model = DownstreamModel(flat_lik, prior, theta_dim=1)
        upstream = UpstreamSamples(np.random.default_rng(0).standard_normal((40, 1)))
        draws = nested_mcmc_cut(model, upstream, MCMCConfig(warmup=300, kept=200, seed=5))
        assert abs(draws.theta.mean()) < 0.05
        assert abs(draws.theta.var() - 1.0) < 0.08

    def test_eta_pooling_order_and_row_count(self):
        model, upstream, _ = gaussian_bias_setup(seed=3, n_upstream=5)
        config = MCMCConfig(warmup=50, kept=7, seed=6)
        draws = nested_mcmc_cut(model, upstream, config)
        assert draws.n == 35
        expected_eta = np.repeat(upstream.matrix, 7, axis=0)
        assert np.array_equal(draws.eta, expected_eta)


class TestFullBayes:
    def test_gaussian_bias_joint_matches_closed_form(self):
        from cutflow.models import ExperimentSpec, simulate

        spec = ExperimentSpec("gaussian_bias", seed=4)
        dataset = simulate(spec)
        z, w = dataset.data["z"], dataset.data["w"]
        s_z, s_w = z.sum(), w.sum()
        n1, n2 = z.size, w.size
        post = analytic_gaussian_bias((s_z, s_w, n1, n2), (1.0, 100.0))

        def joint(x):
            upstream_val, bias = x
            ll_up = -0.5 * np.sum((z - upstream_val) ** 2)
            ll_dn = -0.5 * np.sum((w - upstream_val - bias) ** 2)
            lp = -0.5 * upstream_val ** 2 - 50.0 * bias ** 2
            return ll_up + ll_dn + lp

        config = MCMCConfig(warmup=3000, kept=60_000, seed=8)
        chain, _ = full_bayes_mcmc(joint, post.full_mean.copy(), config)
        assert chain[:, 0].mean() == pytest.approx(post.full_mean[0], abs=0.03)
        assert chain[:, 1].mean() == pytest.approx(post.full_mean[1], abs=0.03)
        assert chain[:, 0].std() == pytest.approx(np.sqrt(post.full_cov[0, 0]), rel=0.10)
        assert chain[:, 1].std() == pytest.approx(np.sqrt(post.full_cov[1, 1]), rel=0.10)

    def test_flat_target_on_box_is_uniform(self):
        def boxed(x):
            return 0.0 if np.all(np.abs(x) <= 1.0) else -np.inf

        config = MCMCConfig(warmup=2000, kept=50_000, seed=9)
        chain, _ = full_bayes_mcmc(boxed, np.zeros(1), config)
        stat = kstest(chain[:, 0], "uniform", args=(-1.0, 2.0)).statistic
        assert stat < 0.05

    def test_seed_determinism(self):
        config = MCMCConfig(warmup=100, kept=200, seed=10)
        c1, _ = full_bayes_mcmc(lambda x: -np.sum(x ** 2), np.zeros(3), config)
        c2, _ = full_bayes_mcmc(lambda x: -np.sum(x ** 2), np.zeros(3), config)
        assert np.array_equal(c1, c2)


def linear_conditional_model(slope=2.0):
    """Flat likelihood; conditional prior exactly N(slope * eta, 1)."""

    def log_lik(theta, eta, units=None):
        return np.zeros(ops.values(theta).shape[0])

    def log_prior(theta, eta):
        out = -0.5 * ops.square(theta - slope * eta[:, :1]) \
            - 0.5 * np.log(2.0 * np.pi)
        return ops.sum_(out, axis=1)

    return DownstreamModel(log_lik, log_prior, theta_dim=1)


class TestGaussianVACut:
    def test_in_family_recovery_of_linear_conditional(self):
        model = linear_conditional_model(slope=2.0)
        rng = np.random.default_rng(11)
        upstream = UpstreamSamples(rng.standard_normal((2000, 1)))
        config = TrainConfig(max_iters=3000, patience=3000, lr=1e-2, seed=12)
        family, draws = gaussian_va_cut(model, upstream, config)
        assert family.W[0, 0] == pytest.approx(2.0, abs=0.05)
        assert family.b[0] == pytest.approx(0.0, abs=0.05)
        assert family.sigma[0] == pytest.approx(1.0, abs=0.05)
        assert draws.n == 2000

    def test_zero_iterations_returns_initialized_family(self):
        model = linear_conditional_model()
        upstream = UpstreamSamples(np.zeros((10, 1)))
        family, draws = gaussian_va_cut(model, upstream, TrainConfig(max_iters=0))
        assert family.b[0] == 0.0
        assert family.W[0, 0] == 0.0
        assert family.sigma[0] == 1.0

    def test_constant_mean_structure_underdisperses(self):
        # with the eta-independent family the fitted sd collapses to the
        # conditional sd, far below the marginal spread of the target
        model = linear_conditional_model(slope=2.0)
        rng = np.random.default_rng(13)
        upstream = UpstreamSamples(rng.standard_normal((400, 1)))
        config = TrainConfig(max_iters=2500, patience=2500, lr=2e-2, seed=14)
        family, draws = gaussian_va_cut(model, upstream, config,
                                        mean_structure="constant")
        assert family.sigma[0] == pytest.approx(1.0, abs=0.1)
        marginal_sd = np.sqrt(1.0 + 4.0 * upstream.matrix.var())
        assert draws.theta.std() < 0.5 * marginal_sd

    def test_objective_evaluator_is_shared_with_the_engine(self):
        # evaluating the family through the engine's estimator must agree
        # with the closed-form Gaussian ELBO at the same parameters
        from cutflow.baselines import _GaussianVAFlow
        from cutflow.engine import elbo_hat_z

        model = linear_conditional_model(slope=0.0)  # prior N(0,1), flat lik
        upstream = UpstreamSamples(np.zeros((20_000, 1)))
        flow = _GaussianVAFlow(1, 1, conditional=True)
        flow.store["bias"].data = np.array([0.4])
        flow.store["log_sigma"].data = np.array([np.log(0.8)])
        value, _ = elbo_hat_z(flow, model, upstream, seed=15)
        sigma, b = 0.8, 0.4
        closed = np.log(sigma) - 0.5 * (sigma ** 2 + b ** 2) - 0.5 * np.log(2 * np.pi)
        assert value == pytest.approx(closed, abs=0.02)


class TestDirichletParametricCut:
    def test_simplex_model_trains_and_draws(self):
        from cutflow.models import (
            ExperimentSpec, make_builtin_model, simulate, upstream_samples)

        spec = ExperimentSpec("va_calibration", seed=5)
        dataset = simulate(spec)
        model = make_builtin_model("va_calibration", dataset)
        upstream = upstream_samples("va_calibration", dataset, 100, seed=5)
        config = TrainConfig(max_iters=150, lr=5e-2, seed=16)
        alpha, draws = gaussian_va_cut(model, upstream, config)  # delegates
        assert alpha.shape == (3,)
        assert np.all(alpha > 0)
        np.testing.assert_allclose(draws.theta.sum(axis=1), 1.0, atol=1e-9)
        assert draws.n == 100


class TestAnalyticGaussianBias:
    def test_zero_sums_give_zero_means(self):
        post = analytic_gaussian_bias((0.0, 0.0, 100, 1000), (1.0, 100.0))
        np.testing.assert_allclose(post.full_mean, 0.0)
        assert post.cut_bias_mean == 0.0
        assert post.cut_upstream_mean == 0.0

    def test_worked_example_values(self):
        post = analytic_gaussian_bias((0.0, 1000.0, 100, 1000), (1.0, 100.0))
        assert post.cut_bias_mean == pytest.approx(1000.0 / 1100.0, abs=1e-9)
        assert post.cut_bias_var == pytest.approx(0.0090917, abs=5e-7)
        assert post.full_cov[1, 1] == pytest.approx(0.0052156, abs=5e-7)

    def test_guards(self):
        with pytest.raises(ValueError):
            analytic_gaussian_bias((0.0, 0.0, -1, 10), (1.0, 1.0))
        with pytest.raises(ValueError):
            analytic_gaussian_bias((0.0, 0.0, 10, 10), (0.0, 1.0))
