"""Reference methods: adaptive random-walk Metropolis, multiple-imputation
nested MCMC, full-Bayes MCMC, fixed-form variational cut posteriors, and the
closed-form posteriors of the Gaussian bias-correction model."""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
from scipy.special import gammaln, psi

from . import autodiff as ad
from .engine import CutPosteriorDraws, TrainConfig, sample_cut_posterior, train
from .flows import base_sample, stick_breaking
from .optim import ParamStore, adam_step
from .seeding import derive_rng, derive_seed

__all__ = [
    "MCMCConfig",
    "rw_metropolis",
    "nested_mcmc_cut",
    "full_bayes_mcmc",
    "GaussianVAFamily",
    "gaussian_va_cut",
    "dirichlet_parametric_cut",
    "GaussianBiasPosteriors",
    "analytic_gaussian_bias",
]


@dataclass
class MCMCConfig:
    warmup: int = 500
    kept: int = 100
    thin: int = 1
    init_scale: float = 0.5
    target_accept: float = 0.35
    seed: int = 0

    def validate(self):
        if self.warmup < 0 or self.kept < 1 or self.thin < 1:
            raise ValueError("need warmup >= 0, kept >= 1, thin >= 1")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")


def rw_metropolis(logpdf, init, config):
    """Gaussian random-walk Metropolis with warmup-only scale adaptation.

    The proposal scale follows a Robbins-Monro recursion on the log scale
    toward the target acceptance rate and is frozen once warmup ends.
    Returns (chain of `kept` rows, post-warmup acceptance rate).
    """
    config.validate()
    rng = derive_rng(config.seed, "rw-metropolis")
    x = np.array(init, dtype=np.float64).ravel()
    d = x.shape[0]
    lp = float(logpdf(x))
    if not np.isfinite(lp):
        raise ValueError("rw_metropolis: log-density not finite at init")
    log_scale = np.log(config.init_scale)
    chain = np.empty((config.kept, d))
    accepted = 0
    post_warmup = 0
    kept = 0
    step = 0
    while kept < config.kept:
        step += 1
        proposal = x + np.exp(log_scale) * rng.standard_normal(d)
        lp_prop = float(logpdf(proposal))
        if np.isfinite(lp_prop):
            alpha = min(1.0, np.exp(min(lp_prop - lp, 0.0)))
        else:
            alpha = 0.0
        if rng.uniform() < alpha:
            x, lp = proposal, lp_prop
        if step <= config.warmup:
            log_scale += step ** -0.6 * (alpha - config.target_accept)
        else:
            post_warmup += 1
            accepted += alpha
            if (post_warmup - 1) % config.thin == 0:
                chain[kept] = x
                kept += 1
    rate = accepted / post_warmup if post_warmup else 0.0
    return chain, rate


def _conditional_target(model, eta_row):
    """Scalar log-density of theta | eta for one upstream draw. Simplex
    models are sampled in stick-breaking coordinates, so the target picks up
    the transform's log-Jacobian."""
    eta_row = np.asarray(eta_row, dtype=np.float64)[None, :]
    if model.support == "simplex":
        def target(y):
            p, logdet = stick_breaking(y)
            val = model.log_lik(p[None, :], eta_row)[0] \
                + model.log_prior(p[None, :], eta_row)[0]
            return val + logdet
        return target, model.theta_dim - 1

    def target(theta):
        th = theta[None, :]
        return model.log_lik(th, eta_row)[0] + model.log_prior(th, eta_row)[0]
    return target, model.theta_dim


def nested_mcmc_cut(model, upstream, config):
    """Multiple-imputation nested MCMC: one downstream chain per upstream
    draw, pooled in upstream order. Failed chains are excluded and counted in
    the provenance.

    Chains warm-start at the previous draw's final state (adjacent upstream
    draws have nearby conditionals, so later chains begin essentially in
    stationarity); the first chain gets an extended warmup to find the
    conditional mode from scratch."""
    config.validate()
    n = upstream.n
    etas = []
    thetas = []
    failed = 0
    state = None
    for i in range(n):
        eta_row = upstream.matrix[i]
        target, d = _conditional_target(model, eta_row)
        chain_config = MCMCConfig(
            warmup=config.warmup if state is not None else 8 * config.warmup,
            kept=config.kept, thin=config.thin,
            init_scale=config.init_scale, target_accept=config.target_accept,
            seed=derive_seed(config.seed, "nested", i),
        )
        init = state if state is not None else np.zeros(d)
        try:
            chain, _ = rw_metropolis(target, init, chain_config)
        except ValueError:
            failed += 1
            continue
        state = chain[-1]
        if model.support == "simplex":
            chain = np.vstack([stick_breaking(row)[0] for row in chain])
        etas.append(np.repeat(eta_row[None, :], chain.shape[0], axis=0))
        thetas.append(chain)
    if not etas:
        raise RuntimeError("nested_mcmc_cut: every per-draw chain failed")
    prov = {"method": "nested_mcmc", "seed": config.seed,
            "kept_per_eta": config.kept, "failed_chains": failed}
    return CutPosteriorDraws(np.vstack(etas), np.vstack(thetas), prov)


def full_bayes_mcmc(joint_logpdf, init, config):
    """Random-walk chain over the concatenated (theta, eta) space."""
    return rw_metropolis(joint_logpdf, init, config)


# ---------------------------------------------------------------------------
# fixed-form variational cut posteriors


@dataclass
class GaussianVAFamily:
    """Mean-field Gaussian conditional family: mean b + W eta, diagonal sd."""

    b: np.ndarray
    W: np.ndarray
    log_sigma: np.ndarray

    @property
    def sigma(self):
        return np.exp(self.log_sigma)


class _GaussianVAFlow:
    """Flow-protocol adapter so the Gaussian family trains through the exact
    same objective evaluator and loop as the nonparametric flows."""

    def __init__(self, dim, eta_dim, conditional=True):
        self.store = ParamStore()
        self._b = self.store.add("bias", np.zeros(dim))
        self._log_sigma = self.store.add("log_sigma", np.zeros(dim))
        # weights held as (eta_dim, dim) so the mean map is eta @ weights
        self._weights = self.store.add("weights", np.zeros((eta_dim, dim))) \
            if conditional else None
        self.config = SimpleNamespace(
            dim=dim, eta_dim=eta_dim, base="standard-normal",
            student_df=None, head="identity", theta_dim=dim)

    def sample_base(self, n, seed):
        return base_sample(n, self.config.dim, "standard-normal", seed)

    def forward(self, eta, z):
        n = eta.shape[0]
        zt = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
        mean = self._b if self._weights is None \
            else ad.matmul(ad.Tensor(eta), self._weights) + self._b
        theta = mean + ad.exp(self._log_sigma) * zt
        logdet = ad.Tensor(np.ones((n, 1))) * ad.sum_(self._log_sigma)
        return theta, logdet

    def forward_np(self, eta, z):
        mean = self._b.data if self._weights is None \
            else eta @ self._weights.data + self._b.data
        theta = mean + np.exp(self._log_sigma.data) * z
        logdet = np.full(eta.shape[0], self._log_sigma.data.sum())
        return theta, logdet

    def family(self):
        dim, eta_dim = self.config.dim, self.config.eta_dim
        w = np.zeros((dim, eta_dim)) if self._weights is None else self._weights.data.T.copy()
        return GaussianVAFamily(self._b.data.copy(), w, self._log_sigma.data.copy())


def gaussian_va_cut(model, upstream, config, mean_structure="linear"):
    """Fixed-form parametric cut posterior, trained on the same objective.

    mean_structure "linear" learns mean = b + W eta; "constant" freezes
    W = 0 (a single Gaussian across upstream draws, which is how the
    mean-field family behaves in the benchmark comparisons). Simplex-support
    models delegate to the Dirichlet family.

    Returns (fitted family, paired cut draws).
    """
    if model.support == "simplex":
        return dirichlet_parametric_cut(model, upstream, config)
    if mean_structure not in ("linear", "constant"):
        raise ValueError(f"unknown mean_structure {mean_structure!r}")
    flow = _GaussianVAFlow(model.theta_dim, upstream.dim,
                           conditional=mean_structure == "linear")
    train(flow, model, upstream, config)
    draws = sample_cut_posterior(
        flow, upstream, derive_seed(config.seed, "va-cut-draws"),
        provenance={"method": f"gaussian_va_cut:{mean_structure}"})
    return flow.family(), draws


def dirichlet_parametric_cut(model, upstream, config):
    """Parametric simplex cut posterior q(p | Phi) = Dirichlet(Phi^T alpha).

    Dirichlet draws have no useful pathwise reparameterization, so alpha is
    fit by score-function gradient ascent on the same ELBO (log-density terms
    evaluated exactly, mean-subtracted baseline for variance control).

    Returns (fitted alpha, paired cut draws).
    """
    from .models import confusion_from_vec

    c = model.theta_dim
    n = upstream.n
    phis = confusion_from_vec(upstream.matrix, c)     # (N, C, C)
    store = ParamStore()
    rho = store.add("log_alpha", np.zeros(c))
    rng = derive_rng(config.seed, "dirichlet-cut")

    def elbo_and_grad(alpha):
        conc = np.einsum("nij,i->nj", phis, alpha)    # rows of Phi^T alpha
        conc = np.maximum(conc, 1e-6)
        draws = np.vstack([rng.dirichlet(conc[i]) for i in range(n)])
        draws = np.clip(draws, 1e-12, None)
        ll = model.log_lik(draws, upstream.matrix)
        lp = model.log_prior(draws, upstream.matrix)
        log_q = (gammaln(conc.sum(axis=1)) - gammaln(conc).sum(axis=1)
                 + ((conc - 1.0) * np.log(draws)).sum(axis=1))
        f = ll + lp - log_q
        score = np.einsum("nij,nj->ni", phis,
                          psi(conc.sum(axis=1))[:, None] - psi(conc) + np.log(draws))
        centred = f - f.mean()
        grad_alpha = (centred[:, None] * score).mean(axis=0)
        return float(f.mean()), grad_alpha

    steps = max(config.max_iters, 0)
    for _ in range(steps):
        alpha = np.exp(rho.data)
        _, grad_alpha = elbo_and_grad(alpha)
        adam_step(store, {"log_alpha": grad_alpha * alpha}, config.lr)

    alpha = np.exp(rho.data)
    conc = np.maximum(np.einsum("nij,i->nj", phis, alpha), 1e-6)
    draw_rng = derive_rng(config.seed, "dirichlet-cut-draws")
    theta = np.vstack([draw_rng.dirichlet(conc[i]) for i in range(n)])
    prov = {"method": "dirichlet_parametric_cut", "seed": config.seed}
    return alpha, CutPosteriorDraws(upstream.matrix.copy(), theta, prov)


# ---------------------------------------------------------------------------
# closed forms for the Gaussian bias-correction model


@dataclass
class GaussianBiasPosteriors:
    """Exact posteriors: `full_mean`/`full_cov` are over (upstream, bias);
    the cut posterior factorizes as upstream | small sample times
    bias | large sample, upstream."""

    full_mean: np.ndarray
    full_cov: np.ndarray
    cut_upstream_mean: float
    cut_upstream_var: float
    cut_bias_mean: float
    cut_bias_var: float
    cond_intercept: float   # bias | upstream mean = intercept + slope * upstream
    cond_slope: float
    cond_var: float


def analytic_gaussian_bias(data, hyper):
    """Closed-form full-Bayes and cut posteriors from sufficient statistics.

    data = (S_z, S_w, n1, n2): sums and sizes of the two samples;
    hyper = (delta1, delta2): prior precisions.
    """
    s_z, s_w, n1, n2 = (float(v) for v in data)
    delta1, delta2 = (float(v) for v in hyper)
    if n1 < 0 or n2 < 0:
        raise ValueError("sample sizes must be nonnegative")
    if delta1 <= 0 or delta2 <= 0:
        raise ValueError("prior precisions must be positive")
    denom = (n1 + n2 + delta1) * (n2 + delta2) - n2 ** 2
    if denom <= 0:
        raise ValueError("degenerate posterior (nonpositive precision determinant)")

    full_mean = np.array([
        ((n2 + delta2) * (s_z + s_w) - n2 * s_w) / denom,
        ((n1 + delta1) * s_w - n2 * s_z) / denom,
    ])
    full_cov = np.array([
        [n2 + delta2, -n2],
        [-n2, n1 + n2 + delta1],
    ]) / denom

    cut_upstream_mean = s_z / (n1 + delta1)
    cut_upstream_var = 1.0 / (n1 + delta1)
    cut_bias_mean = ((n1 + delta1) * s_w - n2 * s_z) / ((n1 + delta1) * (n2 + delta2))
    cut_bias_var = 1.0 / (n2 + delta2) + n2 ** 2 / ((n2 + delta2) ** 2 * (n1 + delta1))

    return GaussianBiasPosteriors(
        full_mean=full_mean,
        full_cov=full_cov,
        cut_upstream_mean=cut_upstream_mean,
        cut_upstream_var=cut_upstream_var,
        cut_bias_mean=cut_bias_mean,
        cut_bias_var=cut_bias_var,
        cond_intercept=s_w / (n2 + delta2),
        cond_slope=-n2 / (n2 + delta2),
        cond_var=1.0 / (n2 + delta2),
    )
