"""Objective and training loop for cut-posterior estimation.

The estimator: given upstream draws {eta_i} and a downstream model with
log-likelihood and conditional prior, maximize the sample-average conditional
ELBO over flow parameters

    (1/N) sum_i E_Z[ log|det J_z T(eta_i, Z)| + log p(D2 | T(eta_i,Z), eta_i)
                     + log p(T(eta_i,Z) | eta_i) ],

with one fresh Z per eta by default, by reparameterized Adam ascent with
patience-based early stopping on a smoothed trace. Optionally the eta average
and the likelihood sum are minibatched (doubly/triply stochastic estimates of
the same objective). Paired draws (eta_i, theta_i) from the trained flow are
the cut-posterior sample; the eta marginal is exactly the input sample set.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .flows import ConditionalFlow, FlowConfig
from .optim import adam_step, clip_gradients
from .seeding import derive_rng, derive_seed

__all__ = [
    "OUT_OF_SUPPORT",
    "UpstreamSamples",
    "DownstreamModel",
    "TrainConfig",
    "CutPosteriorDraws",
    "AbortedIteration",
    "TrainingError",
    "TrainResult",
    "elbo_hat_z",
    "elbo_triple",
    "train",
    "sample_cut_posterior",
    "conditional_density_grid",
    "save_checkpoint",
    "load_checkpoint",
]

# -inf log-densities enter the objective as this finite sentinel so gradients
# elsewhere in the batch survive; rows at or below half of it count as
# out-of-support for the abort check.
OUT_OF_SUPPORT = -1e10


@dataclass
class UpstreamSamples:
    """Pre-drawn upstream posterior samples (the only upstream interface)."""

    matrix: np.ndarray
    names: list | None = None

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        if self.matrix.shape[0] < 1:
            raise ValueError("need at least one upstream sample")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("upstream samples must be finite")
        if self.names is not None and len(self.names) != self.matrix.shape[1]:
            raise ValueError("one name per upstream column required")

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]


@dataclass
class DownstreamModel:
    """Downstream log-likelihood / conditional prior pair.

    Both evaluators take a batch: theta (N, theta_dim) and eta (N, eta_dim),
    return per-row values, and must accept autodiff tensors for theta.
    `log_lik(theta, eta, units=idx)` restricts to a subset of the n_units
    i.i.d. units when the model is decomposable (n_units > 0); the engine
    rescales by n/N_D itself.
    """

    log_lik: callable
    log_prior: callable
    theta_dim: int
    support: str = "unconstrained"
    n_units: int = 0
    name: str = ""

    def __post_init__(self):
        if self.support not in ("unconstrained", "simplex"):
            raise ValueError(f"unknown support {self.support!r}")


@dataclass
class TrainConfig:
    max_iters: int = 5000
    patience: int = 200
    lr: float = 1e-3
    n_eta: int = 0        # eta minibatch size; 0 = use every upstream sample
    n_z: int = 1          # fresh base draws per eta per iteration
    n_units: int = 0      # likelihood minibatch size; 0 = full likelihood
    seed: int = 0
    smooth_window: int = 25
    grad_clip: float = 0.0  # global gradient-norm threshold; 0 = off

    def validate(self, model=None):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.smooth_window < 1:
            raise ValueError("smooth_window must be >= 1")
        if min(self.n_eta, self.n_z, self.n_units) < 0:
            raise ValueError("minibatch sizes must be >= 0")
        if self.n_units > 0 and model is not None and model.n_units <= 0:
            raise ValueError("likelihood minibatching needs a decomposable model")


@dataclass
class CutPosteriorDraws:
    """Paired (eta_i, theta_i) rows from the estimated joint cut-posterior."""

    eta: np.ndarray
    theta: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.eta = np.atleast_2d(np.asarray(self.eta, dtype=np.float64))
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=np.float64))
        if self.eta.shape[0] != self.theta.shape[0]:
            raise ValueError("eta and theta row counts differ")

    @property
    def n(self):
        return self.eta.shape[0]


class AbortedIteration(RuntimeError):
    """One objective evaluation was unusable (majority out-of-support or a
    non-finite intermediate); the training loop may retry with fresh noise."""


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# objective


def _elbo_graph(flow, model, eta_batch, z_draws, units, lik_scale):
    """Build the objective graph for one iteration.

    z_draws has shape (n_z, batch, dim); the objective averages rows and
    z-draws. Returns the scalar tensor.
    """
    n_z = z_draws.shape[0]
    batch = eta_batch.shape[0]
    total = None
    for j in range(n_z):
        theta, logdet = flow.forward(eta_batch, z_draws[j])
        if units is None:
            ll = model.log_lik(theta, eta_batch)
        else:
            ll = model.log_lik(theta, eta_batch, units=units)
        lp = model.log_prior(theta, eta_batch)
        ll_vals = ll.data if isinstance(ll, ad.Tensor) else np.asarray(ll)
        lp_vals = lp.data if isinstance(lp, ad.Tensor) else np.asarray(lp)
        bad = np.sum((ll_vals <= OUT_OF_SUPPORT / 2) | (lp_vals <= OUT_OF_SUPPORT / 2))
        if bad > 0.5 * batch:
            raise AbortedIteration(
                f"{bad}/{batch} batch rows out of the model support "
                "(flow image is leaving the support)"
            )
        per = ad.reshape(logdet, (batch,)) + lik_scale * ll + lp
        contrib = ad.mean(per)
        total = contrib if total is None else total + contrib
    return total if n_z == 1 else total * (1.0 / n_z)


def elbo_triple(flow, model, upstream, config, seed):
    """Doubly/triply stochastic ELBO estimate.

    Returns (float value, single-use tape). Unbiased for the full objective;
    with n_eta=0 (all samples), n_z=1, n_units=0 it consumes randomness
    identically to `elbo_hat_z`.
    """
    config.validate(model)
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, "elbo")
    n = upstream.n
    if config.n_eta and config.n_eta < n:
        idx = rng.choice(n, size=config.n_eta, replace=False)
        eta_batch = upstream.matrix[idx]
    else:
        eta_batch = upstream.matrix
    n_z = max(config.n_z, 1)
    z_draws = flow.sample_base(n_z * eta_batch.shape[0], rng).reshape(
        n_z, eta_batch.shape[0], flow.config.dim)
    units = None
    lik_scale = 1.0
    if config.n_units and model.n_units:
        if config.n_units < model.n_units:
            units = rng.choice(model.n_units, size=config.n_units, replace=False)
            lik_scale = model.n_units / config.n_units
        # n_units >= model.n_units degenerates to the full likelihood
    value = _elbo_graph(flow, model, eta_batch, z_draws, units, lik_scale)
    return float(value.data), ad.Tape(value)


def elbo_hat_z(flow, model, upstream, seed):
    """Algorithm-level ELBO: every upstream sample, one fresh Z each."""
    config = TrainConfig(n_eta=0, n_z=1, n_units=0)
    return elbo_triple(flow, model, upstream, config, seed)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    flow: ConditionalFlow
    trace: list
    stop_reason: str
    best_step: int
    aborted: int = 0
    skipped_steps: int = 0


def train(flow, model, upstream, config, on_checkpoint=None, checkpoint_every=0):
    """Adam-ascent training with smoothed-trace patience.

    Evaluates the objective once at initialization to seed the smoothing
    window, then iterates sample-Z / evaluate / backward / ascend. Stops when
    the moving average fails to improve for `patience` consecutive steps, or
    at `max_iters`. The returned flow carries the parameters of the best
    smoothed checkpoint. Fully reproducible per seed.
    """
    config.validate(model)
    trace = []
    if config.max_iters == 0:
        return TrainResult(flow, trace, "max_iters", 0)

    def evaluate(step):
        return elbo_triple(flow, model, upstream, config,
                           derive_rng(config.seed, "elbo", step))

    aborted = 0
    consecutive_aborts = 0
    skipped = 0
    try:
        value0, _ = evaluate(0)
        trace.append(value0)
        best_smoothed = value0
    except (AbortedIteration, ad.AutodiffError):
        aborted += 1
        consecutive_aborts += 1
        best_smoothed = -np.inf
    best_values = flow.store.get_values()
    best_step = 0
    last_improve = 0

    for step in range(1, config.max_iters + 1):
        try:
            value, tape = evaluate(step)
        except (AbortedIteration, ad.AutodiffError) as exc:
            aborted += 1
            consecutive_aborts += 1
            if consecutive_aborts > 10:
                raise TrainingError(
                    f"step {step}: >10 consecutive aborted iterations ({exc})"
                ) from exc
            continue
        consecutive_aborts = 0
        flow.store.zero_grads()
        tape.backward(np.ones(()))
        grads = flow.store.grads()
        if config.grad_clip:
            grads, _ = clip_gradients(grads, config.grad_clip)
        if not adam_step(flow.store, grads, config.lr):
            skipped += 1
        trace.append(value)
        smoothed = float(np.mean(trace[-config.smooth_window:]))
        if smoothed > best_smoothed:
            best_smoothed = smoothed
            best_values = flow.store.get_values()
            best_step = step
            last_improve = step
        elif step - last_improve >= config.patience:
            flow.store.set_values(best_values)
            return TrainResult(flow, trace, "early_stop", best_step, aborted, skipped)
        if checkpoint_every and step % checkpoint_every == 0 and on_checkpoint:
            on_checkpoint(step, flow)

    flow.store.set_values(best_values)
    return TrainResult(flow, trace, "max_iters", best_step, aborted, skipped)


# ---------------------------------------------------------------------------
# cut-posterior sampling and density slices


def sample_cut_posterior(flow, upstream, seed, provenance=None):
    """One fresh base draw per upstream row; eta passes through unchanged."""
    rng = derive_rng(seed, "cut-draws")
    z = flow.sample_base(upstream.n, rng)
    theta, _ = flow.forward_np(upstream.matrix, z)
    prov = {"seed": int(seed), "n": upstream.n}
    if provenance:
        prov.update(provenance)
    return CutPosteriorDraws(upstream.matrix.copy(), theta, prov)


def conditional_density_grid(flow, eta0, grid):
    """q(theta | eta0) on a strictly increasing grid, for scalar flows.

    Spline flows invert analytically; the integration flow bisects to 1e-10.
    Grid points outside the flow's image report density 0.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    logq = flow.conditional_logpdf_1d(np.asarray(eta0, dtype=np.float64), grid)
    with np.errstate(under="ignore"):
        return np.exp(logq)


# ---------------------------------------------------------------------------
# checkpoints: versioned text dump of the flow config and parameters


_CHECKPOINT_HEADER = "cutflow-checkpoint v1"


def save_checkpoint(path, flow):
    lines = [_CHECKPOINT_HEADER, json.dumps(flow.config.to_dict(), sort_keys=True)]
    for name in sorted(flow.store.names()):
        data = flow.store[name].data
        shape = " ".join(str(s) for s in data.shape)
        lines.append(f"param {name} {shape}".rstrip())
        lines.append(" ".join(repr(v) for v in data.ravel().tolist()))
    blob = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(blob)
    return hashlib.sha256(blob.encode()).hexdigest()


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a recognized checkpoint file")
    config = FlowConfig.from_dict(json.loads(lines[1]))
    flow = ConditionalFlow(config)
    values = {}
    i = 2
    while i < len(lines):
        if not lines[i].startswith("param "):
            raise ValueError(f"{path}: malformed checkpoint at line {i + 1}")
        parts = lines[i].split()
        name = parts[1]
        shape = tuple(int(s) for s in parts[2:])
        flat = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        values[name] = flat.reshape(shape)
        i += 2
    flow.store.set_values(values)
    return flow
