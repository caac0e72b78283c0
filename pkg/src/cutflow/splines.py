"""Monotone rational-quadratic splines with identity tails.

The transform is piecewise rational-quadratic on [-B, B] and the identity
outside. Inside a bin [x_i, x_{i+1}] with output bin [y_i, y_i+h_i], bin
ratio D_i = h_i/w_i, knot slopes s_i, and t = (z - x_i)/w_i:

    f(z)  = y_i + h_i * (D_i t^2 + s_i t(1-t)) / (D_i + (s_{i+1}+s_i-2D_i) t(1-t))
    f'(z) = D_i^2 (s_{i+1} t^2 + 2 D_i t(1-t) + s_i (1-t)^2) / (...)^2

Boundary slopes are fixed to 1 so the map is C^1 where it meets the identity
tails. The inverse solves the per-bin quadratic in closed form.

Two parallel code paths: plain numpy (scalar/batched evaluation, inversion)
and autodiff tensors (training). Bin *selection* always happens on raw
values; gradients flow through the formula of the selected bin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "ActivatedSpline",
    "activate_spline",
    "rqs_forward",
    "rqs_inverse",
]

MIN_SLOPE = 1e-3
# raw slope logit 0 must activate to slope exactly 1 (identity start)
_SLOPE_SHIFT = float(np.log(np.expm1(1.0 - MIN_SLOPE)))


@dataclass
class ActivatedSpline:
    """Knot grid of one scalar spline after activation.

    knots_in / knots_out are the K+1 input/output knot positions (both
    strictly increasing from -B to B); slopes holds the K+1 derivatives at
    the knots with slopes[0] = slopes[-1] = 1.
    """

    knots_in: np.ndarray
    knots_out: np.ndarray
    slopes: np.ndarray
    halfwidth: float


def _softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def activate_spline(raw, bins, halfwidth, envelope=None):
    """Turn a raw parameter vector (K widths, K heights, K-1 slopes) into an
    ActivatedSpline. Widths and heights are softmax-scaled to sum to 2B with
    a floor of 1e-3 * 2B/K each; slopes go through a shifted softplus floored
    at 1e-3 so a zero raw vector activates to the identity map.

    With `envelope=(M*, A*, B*)` the interior log-slopes are instead clipped
    to +/-(A* + B*|x_i|) at their knots and exponentiated.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (3 * bins - 1,):
        raise ValueError(f"raw spline vector must have length {3 * bins - 1}")
    two_b = 2.0 * halfwidth
    min_frac = 1e-3 / bins
    widths = two_b * (min_frac + (1.0 - bins * min_frac) * _softmax_np(raw[:bins]))
    heights = two_b * (min_frac + (1.0 - bins * min_frac) * _softmax_np(raw[bins:2 * bins]))
    knots_in = np.concatenate([[-halfwidth], -halfwidth + np.cumsum(widths)])
    knots_out = np.concatenate([[-halfwidth], -halfwidth + np.cumsum(heights)])
    s_raw = raw[2 * bins:]
    if envelope is None:
        interior = MIN_SLOPE + _softplus_np(s_raw + _SLOPE_SHIFT)
    else:
        _, a_star, b_star = envelope
        bound = a_star + b_star * np.abs(knots_in[1:-1])
        interior = np.exp(np.clip(s_raw, -bound, bound))
    slopes = np.concatenate([[1.0], interior, [1.0]])
    return ActivatedSpline(knots_in, knots_out, slopes, float(halfwidth))


def _bin_index(values, knots):
    idx = np.searchsorted(knots, values, side="right") - 1
    return np.clip(idx, 0, len(knots) - 2)


def rqs_forward(z, spline):
    """Evaluate the spline and its log-derivative at scalar (or array) z."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.isnan(z)):
        raise ValueError("rqs_forward: NaN input")
    b = spline.halfwidth
    inside = np.abs(z) <= b
    z_in = np.clip(z, -b, b)
    idx = _bin_index(z_in, spline.knots_in)
    x0 = spline.knots_in[idx]
    w = spline.knots_in[idx + 1] - x0
    y0 = spline.knots_out[idx]
    h = spline.knots_out[idx + 1] - y0
    s0 = spline.slopes[idx]
    s1 = spline.slopes[idx + 1]
    delta = h / w
    t = (z_in - x0) / w
    tt = t * (1.0 - t)
    denom = delta + (s1 + s0 - 2.0 * delta) * tt
    x = y0 + h * (delta * t * t + s0 * tt) / denom
    num = delta * delta * (s1 * t * t + 2.0 * delta * tt + s0 * (1.0 - t) ** 2)
    log_deriv = np.log(num) - 2.0 * np.log(denom)
    x = np.where(inside, x, z)
    log_deriv = np.where(inside, log_deriv, 0.0)
    if x.ndim == 0:
        return float(x), float(log_deriv)
    return x, log_deriv


def rqs_inverse(x, spline):
    """Invert the spline by per-bin quadratic root solving (no iteration).

    Returns (z, log-derivative of the inverse map), so the second value is
    the negative of the forward log-derivative at the recovered z.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise ValueError("rqs_inverse: NaN input")
    b = spline.halfwidth
    inside = np.abs(x) <= b
    x_in = np.clip(x, -b, b)
    idx = _bin_index(x_in, spline.knots_out)
    x0 = spline.knots_in[idx]
    w = spline.knots_in[idx + 1] - x0
    y0 = spline.knots_out[idx]
    h = spline.knots_out[idx + 1] - y0
    s0 = spline.slopes[idx]
    s1 = spline.slopes[idx + 1]
    delta = h / w
    xhat = x_in - y0
    cross = s1 + s0 - 2.0 * delta
    qa = h * (delta - s0) + xhat * cross
    qb = h * s0 - xhat * cross
    qc = -xhat * delta
    disc = qb * qb - 4.0 * qa * qc
    t = 2.0 * qc / (-qb - np.sqrt(np.maximum(disc, 0.0)))
    z = x0 + t * w
    tt = t * (1.0 - t)
    denom = delta + cross * tt
    num = delta * delta * (s1 * t * t + 2.0 * delta * tt + s0 * (1.0 - t) ** 2)
    log_deriv_inv = -(np.log(num) - 2.0 * np.log(denom))
    z = np.where(inside, z, x)
    log_deriv_inv = np.where(inside, log_deriv_inv, 0.0)
    if z.ndim == 0:
        return float(z), float(log_deriv_inv)
    return z, log_deriv_inv


# ---------------------------------------------------------------------------
# batched autodiff path (used by the flow layers)


def activate_spline_ad(raw, bins, halfwidth, envelope=None):
    """Autodiff version of activate_spline for a [N, 3K-1] raw tensor.

    Returns (knots_in, knots_out, slopes) as [N, K+1] tensors.
    """
    n = raw.shape[0]
    two_b = 2.0 * halfwidth
    min_frac = 1e-3 / bins
    scale = 1.0 - bins * min_frac

    w_logits = ad.take(raw, (slice(None), slice(0, bins)))
    h_logits = ad.take(raw, (slice(None), slice(bins, 2 * bins)))
    s_raw = ad.take(raw, (slice(None), slice(2 * bins, None)))

    widths = (ad.softmax(w_logits, axis=1) * scale + min_frac) * two_b
    heights = (ad.softmax(h_logits, axis=1) * scale + min_frac) * two_b
    zero_col = ad.Tensor(np.zeros((n, 1)))
    knots_in = ad.concat([zero_col, ad.cumsum(widths, axis=1)], axis=1) - halfwidth
    knots_out = ad.concat([zero_col, ad.cumsum(heights, axis=1)], axis=1) - halfwidth

    if envelope is None:
        interior = ad.softplus(s_raw + _SLOPE_SHIFT) + MIN_SLOPE
    else:
        _, a_star, b_star = envelope
        # knot positions are data for the clip bounds; the clip itself stays
        # 1-Lipschitz in the raw logits
        bound = a_star + b_star * np.abs(knots_in.data[:, 1:-1])
        interior = ad.exp(ad.clip(s_raw, -bound, bound))
    one_col = ad.Tensor(np.ones((n, 1)))
    slopes = ad.concat([one_col, interior, one_col], axis=1)
    return knots_in, knots_out, slopes


def spline_transform_ad(z, knots, bins, halfwidth):
    """Apply the spline coordinate-wise for a [N, 1] tensor z.

    `knots` is the (knots_in, knots_out, slopes) triple from
    activate_spline_ad. Returns ([N,1] output, [N,1] log-derivative).
    """
    knots_in, knots_out, slopes = knots
    z_data = z.data[:, 0]
    inside = (np.abs(z_data) <= halfwidth)[:, None]
    idx = np.empty(z_data.shape[0], dtype=np.intp)
    kd = knots_in.data
    for_rows = np.clip(z_data, -halfwidth, halfwidth)
    idx = (for_rows[:, None] >= kd[:, :-1]).sum(axis=1) - 1
    idx = np.clip(idx, 0, bins - 1)[:, None]

    z_in = ad.clip(z, -halfwidth, halfwidth)
    x0 = ad.take_along(knots_in, idx)
    x1 = ad.take_along(knots_in, idx + 1)
    y0 = ad.take_along(knots_out, idx)
    y1 = ad.take_along(knots_out, idx + 1)
    s0 = ad.take_along(slopes, idx)
    s1 = ad.take_along(slopes, idx + 1)

    w = x1 - x0
    h = y1 - y0
    delta = h / w
    t = (z_in - x0) / w
    one_minus = 1.0 - t
    tt = t * one_minus
    denom = delta + (s1 + s0 - 2.0 * delta) * tt
    x = y0 + h * (delta * ad.square(t) + s0 * tt) / denom
    num = ad.square(delta) * (s1 * ad.square(t) + 2.0 * delta * tt + s0 * ad.square(one_minus))
    log_deriv = ad.log(num) - 2.0 * ad.log(denom)

    zeros = ad.Tensor(np.zeros(z.shape))
    return ad.where(inside, x, z), ad.where(inside, log_deriv, zeros)


def spline_params_np(raw, bins, halfwidth, envelope=None):
    """activate_spline for a [N, 3K-1] raw array; returns [N, K+1] arrays."""
    raw = np.asarray(raw, dtype=np.float64)
    two_b = 2.0 * halfwidth
    min_frac = 1e-3 / bins
    scale = 1.0 - bins * min_frac
    widths = two_b * (min_frac + scale * _softmax_np(raw[:, :bins]))
    heights = two_b * (min_frac + scale * _softmax_np(raw[:, bins:2 * bins]))
    n = raw.shape[0]
    zero = np.zeros((n, 1))
    knots_in = np.concatenate([zero, np.cumsum(widths, axis=1)], axis=1) - halfwidth
    knots_out = np.concatenate([zero, np.cumsum(heights, axis=1)], axis=1) - halfwidth
    s_raw = raw[:, 2 * bins:]
    if envelope is None:
        interior = MIN_SLOPE + _softplus_np(s_raw + _SLOPE_SHIFT)
    else:
        _, a_star, b_star = envelope
        bound = a_star + b_star * np.abs(knots_in[:, 1:-1])
        interior = np.exp(np.clip(s_raw, -bound, bound))
    ones = np.ones((n, 1))
    slopes = np.concatenate([ones, interior, ones], axis=1)
    return knots_in, knots_out, slopes


def spline_forward_np(z, knot_arrays, bins, halfwidth):
    """Vectorized forward pass for [N] z against per-row knot arrays."""
    knots_in, knots_out, slopes = knot_arrays
    z = np.asarray(z, dtype=np.float64)
    inside = np.abs(z) <= halfwidth
    z_in = np.clip(z, -halfwidth, halfwidth)
    idx = (z_in[:, None] >= knots_in[:, :-1]).sum(axis=1) - 1
    idx = np.clip(idx, 0, bins - 1)
    rows = np.arange(z.shape[0])
    x0 = knots_in[rows, idx]
    w = knots_in[rows, idx + 1] - x0
    y0 = knots_out[rows, idx]
    h = knots_out[rows, idx + 1] - y0
    s0 = slopes[rows, idx]
    s1 = slopes[rows, idx + 1]
    delta = h / w
    t = (z_in - x0) / w
    tt = t * (1.0 - t)
    denom = delta + (s1 + s0 - 2.0 * delta) * tt
    x = y0 + h * (delta * t * t + s0 * tt) / denom
    num = delta * delta * (s1 * t * t + 2.0 * delta * tt + s0 * (1.0 - t) ** 2)
    log_deriv = np.log(num) - 2.0 * np.log(denom)
    return np.where(inside, x, z), np.where(inside, log_deriv, 0.0)


def spline_inverse_np(x, knot_arrays, bins, halfwidth):
    """Vectorized closed-form inverse for [N] x against per-row knot arrays."""
    knots_in, knots_out, slopes = knot_arrays
    x = np.asarray(x, dtype=np.float64)
    inside = np.abs(x) <= halfwidth
    x_in = np.clip(x, -halfwidth, halfwidth)
    idx = (x_in[:, None] >= knots_out[:, :-1]).sum(axis=1) - 1
    idx = np.clip(idx, 0, bins - 1)
    rows = np.arange(x.shape[0])
    x0 = knots_in[rows, idx]
    w = knots_in[rows, idx + 1] - x0
    y0 = knots_out[rows, idx]
    h = knots_out[rows, idx + 1] - y0
    s0 = slopes[rows, idx]
    s1 = slopes[rows, idx + 1]
    delta = h / w
    xhat = x_in - y0
    cross = s1 + s0 - 2.0 * delta
    qa = h * (delta - s0) + xhat * cross
    qb = h * s0 - xhat * cross
    qc = -xhat * delta
    disc = np.maximum(qb * qb - 4.0 * qa * qc, 0.0)
    t = 2.0 * qc / (-qb - np.sqrt(disc))
    z = x0 + t * w
    tt = t * (1.0 - t)
    denom = delta + cross * tt
    num = delta * delta * (s1 * t * t + 2.0 * delta * tt + s0 * (1.0 - t) ** 2)
    log_deriv_inv = -(np.log(num) - 2.0 * np.log(denom))
    return np.where(inside, z, x), np.where(inside, log_deriv_inv, 0.0)
