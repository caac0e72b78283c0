"""Reverse-mode differentiation over dense float64 arrays.

A small dynamic-graph engine: every operation records its parents and a
vector-Jacobian-product closure on the output tensor, and a `Tape` built from
an output node replays those closures once, in reverse topological order.
Graphs are rebuilt on every evaluation (the downstream log-density is a user
callback, so nothing can be compiled ahead of time) and tapes are single-use.

Only what the flow conditioners and the ELBO need is implemented: 2-d matmul,
elementwise arithmetic with numpy broadcasting, the usual activations, and a
few indexing/reduction ops. No convolutions, no higher-order derivatives.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "AutodiffError",
    "Tensor",
    "Tape",
    "forward_eval",
    "backward",
    "grad_check",
    "set_finite_checks",
]


class AutodiffError(ValueError):
    """Shape mismatch, non-finite intermediate, or tape misuse."""


# Every primitive checks its output for NaN/inf so a bad node is reported at
# the op that produced it rather than as a corrupted gradient later. The
# check is cheap relative to the array work but can be switched off.
_CHECK_FINITE = True


def set_finite_checks(enabled):
    """Globally enable/disable per-op non-finite rejection."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _asarray(x):
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "grad", "name", "_parents", "_vjp")

    # keep numpy from absorbing us into object arrays; binary ops with
    # ndarrays fall back to our reflected operators instead
    __array_ufunc__ = None

    def __init__(self, data, name=None):
        self.data = _asarray(data)
        self.grad = None
        self.name = name
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self._vjp is None

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; constants are lifted to leaf tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op, data, parents, vjp):
    # a single reduction: any NaN/inf in `data` makes the sum non-finite
    if _CHECK_FINITE and not np.isfinite(np.sum(data)):
        raise AutodiffError(f"{op}: non-finite value in output")
    out = Tensor(data)
    out._parents = tuple(parents)
    out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _elementwise(op, a, b, fn, vjp_factory):
    a, b = _lift(a), _lift(b)
    try:
        data = fn(a.data, b.data)
    except ValueError as exc:
        raise AutodiffError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from exc
    return _node(op, data, (a, b), vjp_factory(a, b))


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    return _elementwise(
        "add", a, b, np.add,
        lambda a, b: lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    return _elementwise(
        "sub", a, b, np.subtract,
        lambda a, b: lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    return _elementwise(
        "mul", a, b, np.multiply,
        lambda a, b: lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b):
    return _elementwise(
        "div", a, b, np.divide,
        lambda a, b: lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    a = _lift(a)
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def pow_const(a, exponent):
    if isinstance(exponent, Tensor):
        raise AutodiffError("pow: only constant exponents are supported")
    a = _lift(a)
    p = float(exponent)
    data = a.data ** p
    return _node("pow", data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def square(a):
    a = _lift(a)
    return _node("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a):
    a = _lift(a)
    root = np.sqrt(a.data)
    return _node("sqrt", root, (a,), lambda g: (0.5 * g / root,))


def abs_(a):
    a = _lift(a)
    return _node("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------------------
# activations and transcendentals


def exp(a):
    a = _lift(a)
    data = np.exp(a.data)
    return _node("exp", data, (a,), lambda g: (g * data,))


def log(a):
    a = _lift(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)
    return _node("log", data, (a,), lambda g: (g / a.data,))


def tanh(a):
    a = _lift(a)
    data = np.tanh(a.data)
    return _node("tanh", data, (a,), lambda g: (g * (1.0 - data * data),))


def sigmoid(a):
    a = _lift(a)
    data = expit(a.data)
    return _node("sigmoid", data, (a,), lambda g: (g * data * (1.0 - data),))


def softplus(a):
    """log(1 + e^x), computed without overflow."""
    a = _lift(a)
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _node("softplus", data, (a,), lambda g: (g * expit(a.data),))


def relu(a):
    a = _lift(a)
    mask = a.data > 0.0
    return _node("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.01):
    a = _lift(a)
    factor = np.where(a.data > 0.0, 1.0, slope)
    return _node("leaky_relu", a.data * factor, (a,), lambda g: (g * factor,))


def softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _node("softmax", data, (a,), vjp)


def clip(a, lo, hi):
    """Clamp to [lo, hi]; bounds may be scalars or arrays. Gradient is the
    identity wherever the input was not moved (the 1-Lipschitz clip)."""
    a = _lift(a)
    lo = None if lo is None else _asarray(lo)
    hi = None if hi is None else _asarray(hi)
    data = np.clip(a.data, lo, hi)
    passed = np.ones(a.data.shape, dtype=bool)
    if lo is not None:
        passed &= a.data >= lo
    if hi is not None:
        passed &= a.data <= hi
    return _node("clip", data, (a,), lambda g: (g * passed,))


# ---------------------------------------------------------------------------
# reductions, shaping, indexing


def sum_(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_ = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_, a.shape).copy(),)

    return _node("sum", data, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data
    return _node(
        "matmul", data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def reshape(a, shape):
    a = _lift(a)
    return _node("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis if axis >= 0 else t.data.ndim + axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node("concat", data, tuple(tensors), vjp)


def take(a, key):
    """Basic-slicing view (int/slice/tuple); gradient scatter-adds back."""
    a = _lift(a)
    data = a.data[key]
    parts = key if isinstance(key, tuple) else (key,)
    plain = all(isinstance(p, (int, slice)) for p in parts)

    def vjp(g):
        out = np.zeros(a.shape)
        if plain:
            out[key] += g  # basic slices never alias, so no ufunc.at needed
        else:
            np.add.at(out, key, g)
        return (out,)

    return _node("take", data, (a,), vjp)


def take_along(a, indices, axis=1):
    """`np.take_along_axis` for 2-d tensors (per-row column gather)."""
    a = _lift(a)
    if a.data.ndim != 2 or axis != 1:
        raise AutodiffError("take_along: only 2-d tensors with axis=1")
    idx = np.asarray(indices)
    data = np.take_along_axis(a.data, idx, axis=1)

    def vjp(g):
        out = np.zeros(a.shape)
        rows = np.arange(a.shape[0])[:, None]
        np.add.at(out, (rows, idx), g)
        return (out,)

    return _node("take_along", data, (a,), vjp)


def cumsum(a, axis=-1):
    a = _lift(a)
    data = np.cumsum(a.data, axis=axis)

    def vjp(g):
        rev = np.flip(g, axis=axis)
        return (np.flip(np.cumsum(rev, axis=axis), axis=axis),)

    return _node("cumsum", data, (a,), vjp)


def where(mask, a, b):
    """Select by a constant boolean mask (the mask itself has no gradient)."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _lift(a), _lift(b)
    data = np.where(mask, a.data, b.data)
    return _node(
        "where", data, (a, b),
        lambda g: (
            _unbroadcast(g * mask, a.shape),
            _unbroadcast(g * ~mask, b.shape),
        ),
    )


# ---------------------------------------------------------------------------
# tape and driver entry points


class Tape:
    """Topologically ordered graph snapshot behind one output tensor.

    Single-use: the node list is dropped after `backward` so stale parameter
    gradients cannot be re-accumulated by accident.
    """

    def __init__(self, output):
        if not isinstance(output, Tensor):
            raise AutodiffError("Tape: output must be a Tensor")
        self.output = output
        self._order = self._toposort(output)

    @staticmethod
    def _toposort(output):
        order = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    @property
    def consumed(self):
        return self._order is None

    def backward(self, seed_grad=None):
        """Accumulate d(seed·output)/dx into `.grad` of every reachable tensor."""
        if self.consumed:
            raise AutodiffError("Tape: already consumed (tapes are single-use)")
        if seed_grad is None:
            seed_grad = np.ones(self.output.shape)
        seed = _asarray(seed_grad)
        if seed.shape != self.output.shape:
            raise AutodiffError(
                f"backward: seed gradient shape {seed.shape} does not match "
                f"output shape {self.output.shape}"
            )
        for node in self._order:
            node.grad = None
        self.output.grad = seed.copy()
        for node in reversed(self._order):
            if node.grad is None or node._vjp is None:
                continue
            parent_grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad += g
        self._order = None


def forward_eval(graph, inputs, params=None):
    """Run `graph(inputs, params)` with inputs wrapped as named leaf tensors.

    Returns the output tensor and a single-use tape over the recorded
    computation. `graph` receives a dict of named Tensors (and the params
    store untouched) and must return a Tensor.
    """
    wrapped = {k: Tensor(v, name=k) for k, v in inputs.items()}
    value = graph(wrapped, params) if params is not None else graph(wrapped)
    if not isinstance(value, Tensor):
        raise AutodiffError("forward_eval: graph did not return a Tensor")
    return value, Tape(value)


def backward(tape, seed_grad=None):
    """Run the tape and collect gradients of every named leaf it reaches."""
    tape.backward(seed_grad)
    grads = {}
    stack = [tape.output]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.is_leaf and node.name is not None and node.grad is not None:
            grads[node.name] = node.grad
        stack.extend(node._parents)
    return grads


def grad_check(graph, point, step=1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    `graph` maps a dict of named tensors to a scalar tensor; `point` holds the
    arrays to differentiate at. The error is max over all coordinates of
    |g_ad - g_fd| / max(1, |g_fd|).
    """
    if step <= 0:
        raise AutodiffError("grad_check: step must be positive")
    value, tape = forward_eval(graph, point)
    if value.data.size != 1:
        raise AutodiffError("grad_check: graph must return a scalar")
    grads = backward(tape, np.ones(value.shape))

    worst = 0.0
    for name, base in point.items():
        base = _asarray(base)
        g_ad = grads.get(name, np.zeros(base.shape))
        flat = base.ravel()
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + step
            hi = _eval_scalar(graph, point, name, bumped.reshape(base.shape))
            bumped[i] = flat[i] - step
            lo = _eval_scalar(graph, point, name, bumped.reshape(base.shape))
            g_fd = (hi - lo) / (2.0 * step)
            err = abs(np.ravel(g_ad)[i] - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst


def _eval_scalar(graph, point, name, replacement):
    shifted = dict(point)
    shifted[name] = replacement
    value, _ = forward_eval(graph, shifted)
    out = float(value.data)
    if not np.isfinite(out):
        raise AutodiffError("grad_check: non-finite evaluation near point")
    return out
