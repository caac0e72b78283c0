"""Multilayer perceptrons over the autodiff engine, used as flow conditioners."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = ["Mlp"]

_ACTIVATIONS = {
    "relu": ad.relu,
    "leaky_relu": ad.leaky_relu,
    "tanh": ad.tanh,
}


def _init_weight(rng, fan_in, fan_out, activation):
    # He-style scaled uniform for (leaky-)ReLU, Xavier for tanh
    if activation == "tanh":
        limit = np.sqrt(6.0 / (fan_in + fan_out))
    else:
        limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Mlp:
    """Fully connected net with a linear output layer.

    Parameters are registered in a shared ParamStore under `prefix` so
    checkpoints and optimizer steps see a flat named set. With
    `zero_final=True` the output layer starts at exactly zero, which makes
    the flows that consume these outputs start at the identity map.
    """

    def __init__(self, store, prefix, in_dim, hidden, out_dim, rng,
                 activation="relu", zero_final=True):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.prefix = prefix
        self._layers = []
        sizes = [in_dim] + list(hidden) + [out_dim]
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            final = i == n_layers - 1
            if final and zero_final:
                w = np.zeros((fan_in, fan_out))
            else:
                w = _init_weight(rng, fan_in, fan_out, activation)
            weight = store.add(f"{prefix}.w{i}", w)
            bias = store.add(f"{prefix}.b{i}", np.zeros(fan_out))
            self._layers.append((weight, bias))

    def __call__(self, x):
        act = _ACTIVATIONS[self.activation]
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        last = len(self._layers) - 1
        for i, (w, b) in enumerate(self._layers):
            h = ad.matmul(h, w) + b
            if i != last:
                h = act(h)
        return h

    def np_forward(self, x):
        """Graph-free forward pass on a plain array (same arithmetic)."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self._layers) - 1
        for i, (w, b) in enumerate(self._layers):
            h = h @ w.data + b.data
            if i != last:
                if self.activation == "relu":
                    h = np.maximum(h, 0.0)
                elif self.activation == "leaky_relu":
                    h = np.where(h > 0.0, h, 0.01 * h)
                else:
                    h = np.tanh(h)
        return h
