"""Built-in experiment models and data simulators at desk scale.

Five experiments, each with a simulator, an upstream sampler (the posterior
draws the engine consumes), and a downstream model:

* ``mixture``        — eta ~ Gamma(2,1); the downstream conditional density is
  a two-component normal mixture with eta-dependent weight and means, used
  directly as the model log-density (expressiveness study).
* ``gaussian_bias``  — small unbiased sample upstream, large biased sample
  downstream, with an overconfident prior on the bias; every posterior is
  available in closed form.
* ``propensity``     — logistic treatment model upstream, misspecified
  logistic outcome model downstream with propensity-quintile strata
  recomputed for each upstream draw; true treatment effect is zero.
* ``hpv``            — 13-unit Poisson regression of event counts on an
  upstream prevalence vector with Beta posteriors. The shipped table is
  synthetic (generated once from the model and frozen) since no real
  prevalence data is bundled.
* ``va_calibration`` — multinomial counts filtered through a row-stochastic
  confusion matrix; the downstream target is the simplex of class
  prevalences conditioned on vectorized confusion-matrix draws.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, psi  # noqa: F401  (psi used by baselines' family)

from . import ops
from .engine import DownstreamModel, UpstreamSamples
from .seeding import derive_rng

__all__ = [
    "ExperimentSpec",
    "Dataset",
    "EXPERIMENTS",
    "simulate",
    "make_builtin_model",
    "upstream_samples",
    "mixture_conditional_logpdf",
    "confusion_from_vec",
    "save_dataset",
    "load_dataset",
]

EXPERIMENTS = ("mixture", "gaussian_bias", "propensity", "hpv", "va_calibration")

_DEFAULTS = {
    "mixture": {},
    "gaussian_bias": {"n1": 100, "n2": 1000, "phi": 0.0, "eta": 1.0,
                      "delta1": 1.0, "delta2": 100.0},
    "propensity": {"n": 500},
    "hpv": {},
    "va_calibration": {"n": 500, "n_causes": 3, "n_gold": 400},
}


@dataclass
class ExperimentSpec:
    name: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}")
        merged = dict(_DEFAULTS[self.name])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"{self.name}: unknown parameters {sorted(unknown)}")
        merged.update(self.params)
        for key in ("n", "n1", "n2", "n_causes", "n_gold"):
            if key in merged and merged[key] <= 0:
                raise ValueError(f"{self.name}: {key} must be positive")
        self.params = merged


@dataclass
class Dataset:
    name: str
    data: dict
    truth: dict
    spec: ExperimentSpec


def simulate(spec):
    """Draw a dataset from the documented generating process, per seed."""
    rng = derive_rng(spec.seed, "simulate", spec.name)
    p = spec.params
    if spec.name == "mixture":
        return Dataset("mixture", {}, dict(_MIXTURE_CONSTANTS), spec)

    if spec.name == "gaussian_bias":
        z = p["phi"] + rng.standard_normal(p["n1"])
        w = p["phi"] + p["eta"] + rng.standard_normal(p["n2"])
        truth = {"phi": p["phi"], "eta": p["eta"],
                 "delta1": p["delta1"], "delta2": p["delta2"]}
        return Dataset("gaussian_bias", {"z": z, "w": w}, truth, spec)

    if spec.name == "propensity":
        n = p["n"]
        conf = rng.standard_normal((n, 6))
        theta1_star = np.array([0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
        lin_treat = theta1_star[0] + conf @ theta1_star[1:]
        x = (rng.uniform(size=n) < _sigmoid(lin_treat)).astype(np.float64)
        gamma_star = np.array([0.0, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1])
        lin_out = (
            gamma_star[0] * x
            + gamma_star[1] * conf[:, 0]
            + gamma_star[2] * np.exp(conf[:, 1] - 1.0)
            + gamma_star[3] * conf[:, 2]
            + gamma_star[4] * np.exp(conf[:, 3] - 1.0)
            + gamma_star[5] * np.abs(conf[:, 4])
            + gamma_star[6] * np.abs(conf[:, 5])
        )
        y = (rng.uniform(size=n) < _sigmoid(lin_out)).astype(np.float64)
        truth = {"effect": 0.0, "theta1_star": theta1_star, "gamma_star": gamma_star}
        return Dataset("propensity", {"confounders": conf, "treatment": x, "outcome": y},
                       truth, spec)

    if spec.name == "hpv":
        data = {k: np.array(v, dtype=np.float64) for k, v in _HPV_TABLE.items()}
        truth = {"eta1": _HPV_TRUTH[0], "eta2": _HPV_TRUTH[1]}
        return Dataset("hpv", data, truth, spec)

    # va_calibration
    c = p["n_causes"]
    confusion = np.vstack([
        rng.dirichlet(np.ones(c) + 8.0 * np.eye(c)[i]) for i in range(c)
    ])
    prevalence = rng.dirichlet(np.full(c, 2.0))
    counts = rng.multinomial(p["n"], confusion.T @ prevalence).astype(np.float64)
    # synthetic gold-standard labels: n_gold per true cause, classified through
    # the same confusion matrix; their Dirichlet posteriors are the upstream
    gold = np.vstack([rng.multinomial(p["n_gold"], confusion[i]) for i in range(c)])
    truth = {"prevalence": prevalence, "confusion": confusion}
    return Dataset("va_calibration",
                   {"counts": counts, "gold_counts": gold.astype(np.float64)},
                   truth, spec)


def _sigmoid(x):
    from scipy.special import expit
    return expit(x)


# ---------------------------------------------------------------------------
# mixture experiment (closed-form conditional target)

_MIXTURE_CONSTANTS = {"sigma2": 1.5}


def mixture_conditional_logpdf(theta, eta):
    """Log-density of the eta-indexed two-component normal mixture.

    weight(eta) = 0.2 + 0.5*sigmoid(4(eta-2)), means 4*tanh(eta-1) and
    -4*tanh(eta+1), both variances 1.5. Dual-mode: theta may be a tensor;
    eta-derived quantities are reshaped to match theta.
    """
    eta = np.asarray(eta, dtype=np.float64)
    if eta.ndim == 2:
        eta = eta[:, 0]
    weight = 0.2 + 0.5 * _sigmoid(4.0 * (eta - 2.0))
    mu1 = 4.0 * np.tanh(eta - 1.0)
    mu2 = -4.0 * np.tanh(eta + 1.0)
    if ops.values(theta).ndim == 2:
        weight, mu1, mu2 = weight[:, None], mu1[:, None], mu2[:, None]
    sigma2 = _MIXTURE_CONSTANTS["sigma2"]
    norm_const = -0.5 * np.log(2.0 * np.pi * sigma2)
    la = np.log(weight) + norm_const - ops.square(theta - mu1) * (0.5 / sigma2)
    lb = np.log1p(-weight) + norm_const - ops.square(theta - mu2) * (0.5 / sigma2)
    pivot = np.maximum(ops.values(la), ops.values(lb))
    return pivot + ops.log(ops.exp(la - pivot) + ops.exp(lb - pivot))


# ---------------------------------------------------------------------------
# downstream models


def make_builtin_model(name, dataset):
    if name != dataset.name:
        raise ValueError(f"dataset is for {dataset.name!r}, not {name!r}")
    builder = {
        "mixture": _mixture_model,
        "gaussian_bias": _gaussian_bias_model,
        "propensity": _propensity_model,
        "hpv": _hpv_model,
        "va_calibration": _va_calibration_model,
    }[name]
    return builder(dataset)


def _mixture_model(dataset):
    def log_lik(theta, eta, units=None):
        flat = ops.take_cols(theta, 0, 1)
        out = mixture_conditional_logpdf(flat, eta)
        return ops.sum_(out, axis=1)

    def log_prior(theta, eta):
        return np.zeros(ops.values(theta).shape[0])

    return DownstreamModel(log_lik, log_prior, theta_dim=1, name="mixture")


def _gaussian_bias_model(dataset):
    w = np.asarray(dataset.data["w"], dtype=np.float64)
    n2 = w.shape[0]
    delta2 = dataset.spec.params["delta2"]
    s_w = float(w.sum())
    ss_w = float((w * w).sum())
    log2pi = np.log(2.0 * np.pi)

    def log_lik(theta, eta, units=None):
        bias = ops.take_cols(theta, 0, 1)
        mean = bias + eta[:, :1]
        if units is None:
            # sufficient statistics for the full i.i.d. normal likelihood
            quad = ss_w - 2.0 * s_w * mean + n2 * ops.square(mean)
            out = -0.5 * quad - 0.5 * n2 * log2pi
        else:
            wk = w[units]
            resid = ops.square(mean - wk[None, :])  # broadcasting (N,1)-(k,) -> (N,k)
            out = ops.sum_(-0.5 * resid - 0.5 * log2pi, axis=1, keepdims=True)
        return ops.sum_(out, axis=1)

    def log_prior(theta, eta):
        bias = ops.take_cols(theta, 0, 1)
        out = -0.5 * delta2 * ops.square(bias) + 0.5 * np.log(delta2) - 0.5 * log2pi
        return ops.sum_(out, axis=1)

    return DownstreamModel(log_lik, log_prior, theta_dim=1, n_units=n2,
                           name="gaussian_bias")


def _propensity_model(dataset):
    conf = dataset.data["confounders"]
    x = dataset.data["treatment"]
    y = dataset.data["outcome"]
    n = conf.shape[0]
    base_design = np.column_stack([np.ones(n), x])  # intercept + treatment
    prior_var = np.array([800.0, 50.0, 50.0, 50.0, 50.0, 50.0])

    row_cache = {}

    def _masks_for_rows(eta):
        """(N, 4, n) stratum indicators, one slab per eta row."""
        scores = _sigmoid(eta[:, 0:1] + eta[:, 1:] @ conf.T)  # (N, n)
        edges = np.quantile(scores, [0.2, 0.4, 0.6, 0.8], axis=1).T  # (N, 4)
        slabs = np.empty((eta.shape[0], 4, conf.shape[0]))
        for k in range(4):
            lo = edges[:, k][:, None]
            if k < 3:
                hi = edges[:, k + 1][:, None]
                slabs[:, k, :] = (scores > lo) & (scores <= hi)
            else:
                slabs[:, k, :] = scores > lo
        return slabs

    def strata_masks(eta):
        """Quintile-stratum indicators of the propensity scores implied by
        each upstream coefficient draw; returns four (N, n) 0/1 arrays.
        A pure per-row function of eta, memoized row-wise (the engine cycles
        minibatches of one fixed upstream set and each nested chain reuses a
        single row thousands of times)."""
        keys = [row.tobytes() for row in eta]
        missing = [i for i, k in enumerate(keys) if k not in row_cache]
        if missing:
            fresh = _masks_for_rows(eta[missing])
            if len(row_cache) > 4096:
                row_cache.clear()
            for j, i in enumerate(missing):
                row_cache[keys[i]] = fresh[j]
        stacked = np.stack([row_cache[k] for k in keys])  # (N, 4, n)
        return tuple(stacked[:, k, :] for k in range(4))

    def logits(theta, eta, cols):
        masks = strata_masks(eta)
        lin = ops.matmul(ops.take_cols(theta, 0, 2), base_design[cols].T)
        for k in range(4):
            lin = lin + ops.take_cols(theta, 2 + k, 3 + k) * masks[k][:, cols]
        return lin

    def log_lik(theta, eta, units=None):
        cols = slice(None) if units is None else units
        lin = logits(theta, eta, cols)
        yk = y[cols]
        out = yk[None, :] * lin - ops.softplus(lin)
        return ops.sum_(out, axis=1)

    def log_prior(theta, eta):
        out = -0.5 * ops.square(theta) / prior_var \
            - 0.5 * np.log(2.0 * np.pi * prior_var)
        return ops.sum_(out, axis=1)

    return DownstreamModel(log_lik, log_prior, theta_dim=6, n_units=n,
                           name="propensity")


# frozen synthetic 13-unit table (counts drawn once from the model below with
# eta = (-2, 13) and kept fixed; no real prevalence data ships with the repo)
_HPV_TABLE = {
    "infected": [481, 105, 93, 244, 423, 186, 47, 118, 463, 96, 168, 444, 104],
    "sample_size": [2276, 1856, 1483, 1132, 2292, 1202, 894, 1187, 2457, 2508,
                    922, 2648, 1858],
    "cases": [1096, 55, 83, 1049, 506, 465, 84, 291, 365, 110, 480, 227, 161],
    "exposure_years": [476.0, 174.4, 261.7, 357.9, 371.5, 451.2, 355.6, 568.0,
                       169.9, 450.5, 315.0, 187.8, 549.6],
}
_HPV_TRUTH = (-2.0, 13.0)


def _hpv_model(dataset):
    w = dataset.data["cases"]
    t_exp = dataset.data["exposure_years"]
    n_units = w.shape[0]
    const = w * np.log(t_exp) - gammaln(w + 1.0)
    prior_var = 1000.0

    def log_lik(theta, eta, units=None):
        cols = slice(None) if units is None else units
        lin = ops.take_cols(theta, 0, 1) + ops.take_cols(theta, 1, 2) * eta[:, cols]
        out = w[cols][None, :] * lin - t_exp[cols][None, :] * ops.exp(lin) \
            + const[cols][None, :]
        return ops.sum_(out, axis=1)

    def log_prior(theta, eta):
        out = -0.5 * ops.square(theta) / prior_var - 0.5 * np.log(2.0 * np.pi * prior_var)
        return ops.sum_(out, axis=1)

    return DownstreamModel(log_lik, log_prior, theta_dim=2, n_units=n_units, name="hpv")


def confusion_from_vec(eta, n_causes):
    """(N, C, C) confusion matrices from vectorized draws with the last
    column dropped (rows are simplex points, so it is redundant)."""
    eta = np.asarray(eta, dtype=np.float64)
    n_rows = eta.shape[0]
    partial = eta.reshape(n_rows, n_causes, n_causes - 1)
    last = 1.0 - partial.sum(axis=2, keepdims=True)
    return np.concatenate([partial, last], axis=2)


def _va_calibration_model(dataset):
    counts = dataset.data["counts"]
    c = counts.shape[0]
    n = counts.sum()
    mult_const = float(gammaln(n + 1.0) - gammaln(counts + 1.0).sum())
    # conditional prior concentration from the uncalibrated point estimate
    alpha = 1.0 + 4.0 * c * counts / n
    prior_const = float(gammaln(alpha.sum()) - gammaln(alpha).sum())

    def log_lik(theta, eta, units=None):
        phi = confusion_from_vec(eta, c)
        vals = ops.values(theta)
        if np.any(vals < 0) or np.any(np.abs(vals.sum(axis=1) - 1.0) > 1e-8):
            bad = np.zeros(vals.shape[0])
            return bad - 1e10  # off the simplex
        # predicted class probabilities q_j = sum_i phi[i, j] * p_i, per row
        total = None
        for j in range(c):
            qj = None
            for i in range(c):
                term = ops.take_cols(theta, i, i + 1) * phi[:, i, j][:, None]
                qj = term if qj is None else qj + term
            contrib = counts[j] * ops.log(qj)
            total = contrib if total is None else total + contrib
        return ops.sum_(total + mult_const, axis=1)

    def log_prior(theta, eta):
        out = ops.sum_((alpha - 1.0) * ops.log(theta), axis=1)
        return out + prior_const

    return DownstreamModel(log_lik, log_prior, theta_dim=c, support="simplex",
                           name="va_calibration")


# ---------------------------------------------------------------------------
# upstream samplers


def upstream_samples(name, dataset, n_draws, seed):
    """Posterior draws of the upstream quantity for each experiment."""
    rng = derive_rng(seed, "upstream", name)
    if name == "mixture":
        return UpstreamSamples(rng.gamma(2.0, 1.0, size=(n_draws, 1)), ["eta"])

    if name == "gaussian_bias":
        z = dataset.data["z"]
        delta1 = dataset.spec.params["delta1"]
        prec = z.shape[0] + delta1
        mean = z.sum() / prec
        draws = mean + rng.standard_normal((n_draws, 1)) / np.sqrt(prec)
        return UpstreamSamples(draws, ["phi"])

    if name == "propensity":
        from .baselines import MCMCConfig, rw_metropolis
        conf = dataset.data["confounders"]
        x = dataset.data["treatment"]
        design = np.column_stack([np.ones(conf.shape[0]), conf])
        prior_var = np.array([800.0] + [50.0] * 6)

        def logpdf(coef):
            lin = design @ coef
            ll = float(np.sum(x * lin - _softplus_np(lin)))
            lp = float(np.sum(-0.5 * coef ** 2 / prior_var))
            return ll + lp

        config = MCMCConfig(warmup=1500, kept=n_draws, thin=2,
                            seed=int(rng.integers(2 ** 31)))
        chain, _ = rw_metropolis(logpdf, np.zeros(7), config)
        return UpstreamSamples(chain, [f"coef_{i}" for i in range(7)])

    if name == "hpv":
        z = dataset.data["infected"]
        n = dataset.data["sample_size"]
        draws = rng.beta(1.0 + z, 1.0 + n - z, size=(n_draws, z.shape[0]))
        return UpstreamSamples(draws, [f"prevalence_{i}" for i in range(z.shape[0])])

    if name == "va_calibration":
        gold = dataset.data["gold_counts"]
        c = gold.shape[0]
        rows = [rng.dirichlet(1.0 + gold[i], size=n_draws) for i in range(c)]
        mat = np.stack(rows, axis=1)          # (n_draws, C, C)
        vec = mat[:, :, :c - 1].reshape(n_draws, c * (c - 1))
        names = [f"confusion_{i}{j}" for i in range(c) for j in range(c - 1)]
        return UpstreamSamples(vec, names)

    raise ValueError(f"unknown experiment {name!r}")


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# dataset CSV round trip (data arrays + sidecar metadata)


def save_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    for key, arr in dataset.data.items():
        arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        path = os.path.join(directory, f"{key}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"{key}_{j}" for j in range(arr.shape[1])])
            for row in arr:
                writer.writerow([repr(v) for v in row.tolist()])
    meta = {
        "name": dataset.name,
        "seed": dataset.spec.seed,
        "params": _jsonable(dataset.spec.params),
        "truth": _jsonable(dataset.truth),
        "arrays": {k: list(np.asarray(v).shape) for k, v in dataset.data.items()},
    }
    with open(os.path.join(directory, "dataset.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_dataset(directory):
    with open(os.path.join(directory, "dataset.json")) as fh:
        meta = json.load(fh)
    spec = ExperimentSpec(meta["name"], seed=meta["seed"],
                          params={k: v for k, v in meta["params"].items()})
    data = {}
    for key, shape in meta["arrays"].items():
        raw = np.genfromtxt(os.path.join(directory, f"{key}.csv"),
                            delimiter=",", skip_header=1)
        data[key] = raw.reshape(shape)
    truth = {k: (np.asarray(v) if isinstance(v, list) else v)
             for k, v in meta["truth"].items()}
    return Dataset(meta["name"], data, truth, spec)


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif isinstance(v, (np.floating, np.integer)):
            out[k] = v.item()
        else:
            out[k] = v
    return out
