"""Dual-mode math helpers: autodiff tensors in, tensors out; arrays in,
arrays out. Downstream model log-densities are written once against these so
the training engine (which differentiates through theta) and the MCMC
baselines (which only need values) share the exact same arithmetic."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def _is_tensor(*xs):
    return any(isinstance(x, ad.Tensor) for x in xs)


def exp(x):
    return ad.exp(x) if _is_tensor(x) else np.exp(x)


def log(x):
    return ad.log(x) if _is_tensor(x) else np.log(x)


def sigmoid(x):
    from scipy.special import expit
    return ad.sigmoid(x) if _is_tensor(x) else expit(x)


def softplus(x):
    if _is_tensor(x):
        return ad.softplus(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def square(x):
    return ad.square(x) if _is_tensor(x) else x * x


def sum_(x, axis=None, keepdims=False):
    if _is_tensor(x):
        return ad.sum_(x, axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def matmul(a, b):
    return ad.matmul(a, b) if _is_tensor(a, b) else np.asarray(a) @ np.asarray(b)


def clip(x, lo, hi):
    return ad.clip(x, lo, hi) if _is_tensor(x) else np.clip(x, lo, hi)


def where(mask, a, b):
    if _is_tensor(a, b):
        return ad.where(mask, a, b)
    return np.where(mask, a, b)


def take_cols(x, start, stop):
    if _is_tensor(x):
        return ad.take(x, (slice(None), slice(start, stop)))
    return x[:, start:stop]


def values(x):
    """The underlying array, whichever mode we are in."""
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x)
