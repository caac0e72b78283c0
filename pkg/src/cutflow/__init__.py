"""Cut-posterior estimation with conditional normalizing flows.

Trains a conditional flow against a downstream model using only pre-drawn
upstream posterior samples, and benchmarks the result against nested-MCMC,
full-Bayes, and parametric-variational baselines with proper-scoring
metrics.
"""

from .flows import ConditionalFlow, FlowConfig, base_logpdf, base_sample, stick_breaking
from .engine import (
    CutPosteriorDraws,
    DownstreamModel,
    TrainConfig,
    UpstreamSamples,
    conditional_density_grid,
    elbo_hat_z,
    elbo_triple,
    sample_cut_posterior,
    train,
)

__version__ = "0.1.0"
