"""Proper scores and sample distances used by the benchmark reports.

Quantiles everywhere are type-7 (numpy's linear interpolation) so golden
values are stable across runs and platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "crps",
    "interval_score",
    "point_metrics",
    "wasserstein1_1d",
    "wasserstein2_1d",
    "clr",
    "grid_kl",
    "ReplicateReport",
]


def _as_samples(x, minimum=1, what="samples"):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < minimum:
        raise ValueError(f"{what}: need at least {minimum} values, got {x.size}")
    return x


def crps(samples, y):
    """Empirical CRPS: mean|x_j - y| - (1/2m^2) sum_jk |x_j - x_k|.

    The pairwise double sum is evaluated via the sorted identity
    sum_jk |x_j - x_k| = 2 * sum_i (2i + 1 - m) x_(i).
    """
    x = _as_samples(samples)
    m = x.size
    first = np.mean(np.abs(x - float(y)))
    xs = np.sort(x)
    coeffs = 2.0 * np.arange(m) + 1.0 - m
    pair_sum = 2.0 * np.sum(coeffs * xs)
    return float(first - pair_sum / (2.0 * m * m))


def interval_score(samples, y, alpha=0.05):
    """Interval score at level alpha from empirical quantiles:
    (u - l) + (2/alpha) * [(l - y)+ + (y - u)+]."""
    x = _as_samples(samples, minimum=20)
    y = float(y)
    lo = float(np.quantile(x, alpha / 2.0))
    hi = float(np.quantile(x, 1.0 - alpha / 2.0))
    return (hi - lo) + (2.0 / alpha) * (max(lo - y, 0.0) + max(y - hi, 0.0))


def point_metrics(samples, y, alpha=0.05):
    """(squared error of the posterior mean, 95% interval covered flag)."""
    x = _as_samples(samples)
    y = float(y)
    mse = (float(np.mean(x)) - y) ** 2
    lo = float(np.quantile(x, alpha / 2.0))
    hi = float(np.quantile(x, 1.0 - alpha / 2.0))
    return mse, bool(lo <= y <= hi)


def _matched_order_stats(a, b):
    a = np.sort(_as_samples(a, what="first sample"))
    b = np.sort(_as_samples(b, what="second sample"))
    if a.size == b.size:
        return a, b
    m = min(a.size, b.size)
    grid = np.arange(m) / (m - 1) if m > 1 else np.array([0.5])
    if a.size > m:
        a = np.quantile(a, grid)
    else:
        b = np.quantile(b, grid)
    return a, b


def wasserstein1_1d(a, b):
    """1-d W1: mean absolute difference of matched order statistics."""
    a, b = _matched_order_stats(a, b)
    return float(np.mean(np.abs(a - b)))


def wasserstein2_1d(a, b):
    """1-d W2: root mean squared difference of matched order statistics.
    Unequal sizes are resampled to the smaller by sorted-quantile
    interpolation."""
    a, b = _matched_order_stats(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def clr(p):
    """Centered log-ratio transform; components must be strictly positive."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("clr: nonpositive component")
    logs = np.log(p)
    return logs - logs.mean(axis=-1, keepdims=True)


def grid_kl(q_values, p_values, spacing):
    """Trapezoid KL(q || p) on a shared grid after renormalizing both to unit
    trapezoid mass. Rejects support violations (q > 0 where p <= 0), naming
    the offending index."""
    q = np.asarray(q_values, dtype=np.float64)
    p = np.asarray(p_values, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 1:
        raise ValueError("grid_kl: grids must be 1-d and match")
    if spacing <= 0:
        raise ValueError("grid_kl: spacing must be positive")
    if np.any(q < 0) or np.any(p < 0):
        raise ValueError("grid_kl: negative density values")
    bad = np.nonzero((q > 0) & (p <= 0))[0]
    if bad.size:
        raise ValueError(f"grid_kl: support violation at grid index {bad[0]}")
    qn = q / np.trapezoid(q, dx=spacing)
    pn = p / np.trapezoid(p, dx=spacing)
    ratio = np.zeros_like(qn)
    mask = qn > 0
    ratio[mask] = qn[mask] * np.log(qn[mask] / pn[mask])
    return float(np.trapezoid(ratio, dx=spacing))


# ---------------------------------------------------------------------------
# replicate study bookkeeping


@dataclass
class ReplicateReport:
    """Per-replicate, per-method scores with Table-style aggregation
    (median and quartiles; coverage as a rate). Wall times are collected
    apart from the scores so serialized reports stay run-deterministic."""

    experiment: str
    replicates: int
    records: dict = field(default_factory=dict)   # method -> metric -> [values]
    timings: dict = field(default_factory=dict)   # method -> [seconds]

    def add(self, method, metric, value):
        self.records.setdefault(method, {}).setdefault(metric, []).append(
            bool(value) if metric == "covered" else float(value))

    def add_timing(self, method, seconds):
        self.timings.setdefault(method, []).append(float(seconds))

    def aggregate(self):
        out = {}
        for method, metrics in sorted(self.records.items()):
            agg = {}
            for metric, values in sorted(metrics.items()):
                arr = np.asarray(values, dtype=np.float64)
                if metric == "covered":
                    agg["coverage"] = float(arr.mean())
                else:
                    agg[metric] = {
                        "median": float(np.median(arr)),
                        "q25": float(np.quantile(arr, 0.25)),
                        "q75": float(np.quantile(arr, 0.75)),
                    }
            out[method] = agg
        return out

    def to_json(self):
        return json.dumps({
            "experiment": self.experiment,
            "replicates": self.replicates,
            "metrics": self.aggregate(),
        }, indent=2, sort_keys=True)

    def timing_json(self):
        agg = {
            method: {"median_seconds": float(np.median(times)),
                     "total_seconds": float(np.sum(times))}
            for method, times in sorted(self.timings.items())
        }
        return json.dumps(agg, indent=2, sort_keys=True)
