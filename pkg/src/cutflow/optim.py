"""Named parameter storage and the Adam ascent step used by the training loop."""

from __future__ import annotations

import numpy as np

from .autodiff import AutodiffError, Tensor

__all__ = ["ParamStore", "adam_step", "clip_gradients"]


class ParamStore:
    """Named parameter tensors plus per-parameter Adam state.

    Parameters are leaf tensors shared by reference with the graphs built on
    them, so updating `.data` in place is enough to move the model. The Adam
    step counter is shared across the whole store (one optimizer step).
    """

    def __init__(self):
        self.params = {}
        self._m = {}
        self._v = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        tensor = Tensor(np.array(value, dtype=np.float64), name=name)
        self.params[name] = tensor
        self._m[name] = np.zeros(tensor.shape)
        self._v[name] = np.zeros(tensor.shape)
        return tensor

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def items(self):
        return self.params.items()

    def n_values(self):
        return sum(p.data.size for p in self.params.values())

    def grads(self):
        """Collect accumulated gradients (zeros for untouched parameters)."""
        return {
            name: (p.grad if p.grad is not None else np.zeros(p.shape))
            for name, p in self.params.items()
        }

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def get_values(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def set_values(self, values):
        for name, value in values.items():
            p = self.params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(f"parameter {name!r}: shape {value.shape} != {p.data.shape}")
            p.data = value.copy()

    def reset_optimizer(self):
        self.step_count = 0
        for name in self.params:
            self._m[name][...] = 0.0
            self._v[name][...] = 0.0


def adam_step(store, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam *ascent* step (the objective here is maximized).

    Returns True if the step was applied. A non-finite gradient anywhere
    skips the whole step (no state is touched) and returns False so the
    caller can count and report it.
    """
    if lr <= 0:
        raise ValueError("adam_step: lr must be positive")
    updates = {}
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise AutodiffError(f"adam_step: gradient shape {g.shape} != {p.data.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            return False
        updates[name] = g

    store.step_count += 1
    t = store.step_count
    correct1 = 1.0 - beta1 ** t
    correct2 = 1.0 - beta2 ** t
    for name, g in updates.items():
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / correct1
        v_hat = v / correct2
        store.params[name].data += lr * m_hat / (np.sqrt(v_hat) + eps)
    return True


def clip_gradients(grads, max_norm):
    """Scale the whole gradient map so its global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g) ** 2))
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: np.asarray(g) * scale for name, g in grads.items()}, norm
