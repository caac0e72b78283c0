"""Conditional normalizing flows with tracked log-Jacobians.

A flow maps base noise z to the downstream parameter, conditioned on an
upstream draw. Three transform kinds:

* ``rqnsf-ar``  — per-coordinate rational-quadratic splines whose parameters
  come from independent conditioner nets fed (z_<i, eta); lower-triangular
  Jacobian by construction.
* ``rqnsf-c``   — coupling arrangement: the first half passes through, the
  moved half's spline parameters come from one conditioner fed
  (fixed half, eta).
* ``umnn``      — scalar integration transform a(eta) + int_0^z e^{g(eta,t)} dt
  with the integral evaluated by Gauss-Legendre quadrature; the
  log-derivative is exactly g(eta, z).

Spline layers are stacked with a coordinate-reversal permutation in between.
An optional stick-breaking head maps a (C-1)-dimensional output onto the
C-simplex, contributing its own log-Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from . import splines
from .nn import Mlp
from .optim import ParamStore
from .seeding import derive_rng

__all__ = [
    "FlowConfig",
    "ConditionalFlow",
    "base_sample",
    "base_logpdf",
    "stick_breaking",
]

_KINDS = ("rqnsf-ar", "rqnsf-c", "umnn")
_BASES = ("standard-normal", "student-t")
_HEADS = ("identity", "stick-breaking")


@dataclass
class FlowConfig:
    kind: str = "rqnsf-ar"
    dim: int = 1                      # raw output dimension (C-1 for simplex head)
    eta_dim: int = 1
    layers: int = 4
    bins: int = 8
    halfwidth: float = 6.0
    hidden: tuple = (64, 64)          # conditioner hidden widths
    base: str = "standard-normal"
    student_df: float = 5.0
    head: str = "identity"
    envelope: tuple | None = None     # (M*, A*, B*) enables clipping
    umnn_width: int = 48
    quadrature_order: int = 32

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.envelope is not None:
            self.envelope = tuple(float(v) for v in self.envelope)
        self.validate()

    def validate(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown flow kind {self.kind!r}")
        if self.base not in _BASES:
            raise ValueError(f"unknown base distribution {self.base!r}")
        if self.head not in _HEADS:
            raise ValueError(f"unknown output head {self.head!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.halfwidth <= 0:
            raise ValueError("halfwidth must be positive")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.base == "student-t" and self.student_df <= 0:
            raise ValueError("student_df must be positive")
        if self.kind == "umnn":
            if self.dim != 1:
                raise ValueError("umnn flows are scalar (dim must be 1)")
            if self.layers != 1:
                raise ValueError("umnn flows use a single integration layer")
            if self.quadrature_order < 4:
                raise ValueError("quadrature_order must be >= 4")
        if self.envelope is not None:
            m_star, a_star, b_star = self.envelope
            if min(m_star, a_star) <= 0 or b_star < 0:
                raise ValueError("envelope constants must be positive")
            if self.kind != "umnn" and m_star < self.halfwidth:
                raise ValueError("envelope M* must cover the spline interval")

    @property
    def theta_dim(self):
        """Dimension of the flow output after the head."""
        return self.dim + 1 if self.head == "stick-breaking" else self.dim

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["envelope"] = list(self.envelope) if self.envelope else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        if d.get("envelope"):
            d["envelope"] = tuple(d["envelope"])
        else:
            d["envelope"] = None
        return cls(**d)


# ---------------------------------------------------------------------------
# base distributions


def base_sample(n, dim, kind, seed, df=None):
    """Draw an (n, dim) matrix of i.i.d. base noise, reproducible per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, "base")
    if kind == "standard-normal":
        return rng.standard_normal((n, dim))
    if kind == "student-t":
        if df is None or df <= 0:
            raise ValueError("student-t base needs df > 0")
        return rng.standard_t(df, size=(n, dim))
    raise ValueError(f"unknown base distribution {kind!r}")


def base_logpdf(z, kind, df=None):
    """Exact base log-density; rows of a 2-d input are summed over coordinates."""
    z = np.asarray(z, dtype=np.float64)
    if kind == "standard-normal":
        per = -0.5 * (z * z + np.log(2.0 * np.pi))
    elif kind == "student-t":
        if df is None or df <= 0:
            raise ValueError("student-t base needs df > 0")
        per = (
            gammaln((df + 1.0) / 2.0)
            - gammaln(df / 2.0)
            - 0.5 * np.log(df * np.pi)
            - (df + 1.0) / 2.0 * np.log1p(z * z / df)
        )
    else:
        raise ValueError(f"unknown base distribution {kind!r}")
    if per.ndim == 2:
        return per.sum(axis=1)
    if per.ndim == 0:
        return float(per)
    return per


# ---------------------------------------------------------------------------
# stick-breaking simplex head


def stick_breaking(y):
    """Map a length C-1 vector onto the C-simplex.

    v_k = sigmoid(y_k - log(C-k)); p_k = v_k * prod_{j<k}(1 - v_j); the offset
    centres y = 0 at the uniform simplex point. Returns (p, log|Jacobian|).
    """
    y = np.asarray(y, dtype=np.float64)
    c = y.shape[-1] + 1
    offset = np.log(c - 1.0 - np.arange(c - 1))
    x = y - offset
    log_v = -_softplus(-x)
    log_1mv = -_softplus(x)
    log_rest = np.concatenate([
        np.zeros(y.shape[:-1] + (1,)),
        np.cumsum(log_1mv, axis=-1)[..., :-1],
    ], axis=-1)
    log_p = log_v + log_rest
    p_last = np.exp(np.sum(log_1mv, axis=-1, keepdims=True))
    p = np.concatenate([np.exp(log_p), p_last], axis=-1)
    logdet = np.sum(log_v + log_1mv + log_rest, axis=-1)
    if y.ndim == 1:
        return p, float(logdet)
    return p, logdet


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _stick_breaking_ad(y):
    """Autodiff stick-breaking for a [N, C-1] tensor; returns (p [N,C], logdet [N,1])."""
    n, cm1 = y.shape
    offset = np.log(cm1 - np.arange(cm1, dtype=np.float64))
    x = y - offset
    log_v = -ad.softplus(-x)
    log_1mv = -ad.softplus(x)
    zero = ad.Tensor(np.zeros((n, 1)))
    cums = ad.cumsum(log_1mv, axis=1)
    log_rest = ad.concat([zero, ad.take(cums, (slice(None), slice(0, cm1 - 1)))], axis=1)
    p_head = ad.exp(log_v + log_rest)
    p_last = ad.exp(ad.sum_(log_1mv, axis=1, keepdims=True))
    p = ad.concat([p_head, p_last], axis=1)
    logdet = ad.sum_(log_v + log_1mv + log_rest, axis=1, keepdims=True)
    return p, logdet


# ---------------------------------------------------------------------------
# the conditional flow


class ConditionalFlow:
    """Parameterized transform of base noise, conditioned on an upstream draw.

    Conditioner output layers start at zero, so a fresh flow is exactly the
    identity map with zero log-Jacobian (plus the stick-breaking head when
    configured).
    """

    def __init__(self, config, seed=0):
        self.config = config
        self.store = ParamStore()
        rng = derive_rng(seed, "flow-init")
        d, k = config.dim, config.bins
        n_spline = 3 * k - 1
        if config.kind == "rqnsf-ar":
            self._cond = []
            for layer in range(config.layers):
                row = []
                for i in range(d):
                    row.append(Mlp(
                        self.store, f"layer{layer}.coord{i}",
                        in_dim=i + config.eta_dim, hidden=config.hidden,
                        out_dim=n_spline, rng=rng, activation="relu",
                    ))
                self._cond.append(row)
        elif config.kind == "rqnsf-c":
            self._split = d // 2
            n_moved = d - self._split
            self._cond = []
            for layer in range(config.layers):
                self._cond.append(Mlp(
                    self.store, f"layer{layer}.coupling",
                    in_dim=self._split + config.eta_dim, hidden=config.hidden,
                    out_dim=n_moved * n_spline, rng=rng, activation="relu",
                ))
        else:  # umnn
            w = config.umnn_width
            self._median_net = Mlp(
                self.store, "median", in_dim=config.eta_dim,
                hidden=(w,) * 5, out_dim=1, rng=rng, activation="leaky_relu",
            )
            self._logderiv_net = Mlp(
                self.store, "logderiv", in_dim=config.eta_dim + 1,
                hidden=(w,) * 7, out_dim=1, rng=rng, activation="leaky_relu",
            )
            nodes, weights = np.polynomial.legendre.leggauss(config.quadrature_order)
            self._quad_nodes = nodes
            self._quad_weights = weights

    # -- sampling helpers ---------------------------------------------------

    def sample_base(self, n, seed):
        cfg = self.config
        return base_sample(n, cfg.dim, cfg.base, seed, df=cfg.student_df)

    def base_logpdf(self, z):
        cfg = self.config
        return base_logpdf(z, cfg.base, df=cfg.student_df)

    def composed_permutation(self):
        """Composition of the per-layer coordinate reversals (identity for
        even layer counts, so identity-initialized stacks are exactly the
        identity map)."""
        perm = np.arange(self.config.dim)
        for _ in range(self.config.layers):
            perm = perm[::-1]
        return perm

    # -- forward transform ----------------------------------------------------

    def forward(self, eta, z):
        """Map base noise to the output space.

        eta: (N, eta_dim) array (constant, no gradient);
        z:   (N, dim) array or tensor.
        Returns (theta [N, theta_dim], logdet [N, 1]) as tensors.
        """
        cfg = self.config
        eta = np.asarray(eta, dtype=np.float64)
        if eta.ndim != 2 or eta.shape[1] != cfg.eta_dim:
            raise ValueError(f"eta must be (N, {cfg.eta_dim})")
        h = z if isinstance(z, ad.Tensor) else ad.Tensor(np.asarray(z, dtype=np.float64))
        if h.shape != (eta.shape[0], cfg.dim):
            raise ValueError(f"z must be (N, {cfg.dim})")
        n = eta.shape[0]
        eta_t = ad.Tensor(eta)
        logdet = ad.Tensor(np.zeros((n, 1)))

        if cfg.kind == "umnn":
            theta, logdet = self._umnn_forward(eta, h)
        else:
            reversal = np.arange(cfg.dim)[::-1]
            for layer in range(cfg.layers):
                h, ld = self._spline_layer(layer, eta_t, h)
                logdet = logdet + ld
                if cfg.dim > 1:
                    h = ad.take(h, (slice(None), reversal))
            theta = h

        if cfg.head == "stick-breaking":
            theta, ld = _stick_breaking_ad(theta)
            logdet = logdet + ld
        return theta, logdet

    def _apply_stacked_splines(self, raw_all, z_block, n_moved):
        """Transform `n_moved` coordinates with one batched spline pass.

        raw_all: [N, n_moved * (3K-1)] coordinate-major conditioner output;
        z_block: [N, n_moved]. Rows are regrouped to (N * n_moved, ...) so a
        single spline evaluation covers every coordinate.
        """
        cfg = self.config
        n = z_block.shape[0]
        n_spline = 3 * cfg.bins - 1
        raw_flat = ad.reshape(raw_all, (n * n_moved, n_spline))
        z_flat = ad.reshape(z_block, (n * n_moved, 1))
        knots = splines.activate_spline_ad(raw_flat, cfg.bins, cfg.halfwidth,
                                           cfg.envelope)
        x_flat, ld_flat = splines.spline_transform_ad(z_flat, knots, cfg.bins,
                                                      cfg.halfwidth)
        x = ad.reshape(x_flat, (n, n_moved))
        ld = ad.sum_(ad.reshape(ld_flat, (n, n_moved)), axis=1, keepdims=True)
        return x, ld

    def _spline_layer(self, layer, eta_t, h):
        cfg = self.config
        if cfg.kind == "rqnsf-ar":
            raws = []
            for i in range(cfg.dim):
                if i == 0:
                    cond_in = eta_t
                else:
                    cond_in = ad.concat(
                        [ad.take(h, (slice(None), slice(0, i))), eta_t], axis=1)
                raws.append(self._cond[layer][i](cond_in))
            raw_all = raws[0] if cfg.dim == 1 else ad.concat(raws, axis=1)
            if not np.all(np.isfinite(raw_all.data)):
                raise ad.AutodiffError(f"layer {layer}: NaN in conditioner output")
            return self._apply_stacked_splines(raw_all, h, cfg.dim)

        # coupling
        p = self._split
        if p == 0:
            cond_in = eta_t
        else:
            cond_in = ad.concat([ad.take(h, (slice(None), slice(0, p))), eta_t], axis=1)
        raw_all = self._cond[layer](cond_in)
        if not np.all(np.isfinite(raw_all.data)):
            raise ad.AutodiffError(f"layer {layer}: NaN in conditioner output")
        moved = ad.take(h, (slice(None), slice(p, cfg.dim)))
        x, ld = self._apply_stacked_splines(raw_all, moved, cfg.dim - p)
        if p == 0:
            return x, ld
        return ad.concat([ad.take(h, (slice(None), slice(0, p))), x], axis=1), ld

    def _umnn_forward(self, eta, h):
        cfg = self.config
        n = eta.shape[0]
        q = cfg.quadrature_order
        z_col = h.data[:, 0]
        t_quad = z_col[:, None] * (self._quad_nodes + 1.0) / 2.0      # (N, Q)
        w_quad = (z_col[:, None] / 2.0) * self._quad_weights          # (N, Q)
        eta_rep = np.repeat(eta, q, axis=0)
        quad_in = np.concatenate([eta_rep, t_quad.reshape(-1, 1)], axis=1)
        last_in = np.concatenate([eta, z_col[:, None]], axis=1)
        g_out = self._logderiv_net(ad.Tensor(np.concatenate([quad_in, last_in], axis=0)))
        if cfg.envelope is not None:
            _, a_star, b_star = cfg.envelope
            t_all = np.concatenate([t_quad.reshape(-1, 1), z_col[:, None]], axis=0)
            bound = a_star + b_star * np.abs(t_all)
            g_out = ad.clip(g_out, -bound, bound)
        g_quad = ad.reshape(ad.take(g_out, (slice(0, n * q), slice(0, 1))), (n, q))
        g_last = ad.take(g_out, (slice(n * q, None), slice(0, 1)))
        integral = ad.sum_(ad.exp(g_quad) * w_quad, axis=1, keepdims=True)
        a_out = self._median_net(ad.Tensor(eta))
        if cfg.envelope is not None:
            m_star = cfg.envelope[0]
            a_out = ad.clip(a_out, -m_star, m_star)
        return a_out + integral, g_last

    # -- numpy fast paths (no autodiff) ---------------------------------------

    def forward_np(self, eta, z):
        """Plain-numpy forward pass; same math as `forward`."""
        cfg = self.config
        eta = np.asarray(eta, dtype=np.float64)
        h = np.array(z, dtype=np.float64)
        n = h.shape[0]
        logdet = np.zeros(n)
        if cfg.kind == "umnn":
            theta, logdet = self._umnn_forward_np(eta, h[:, 0])
        else:
            for layer in range(cfg.layers):
                h, ld = self._spline_layer_np(layer, eta, h)
                logdet += ld
                h = h[:, ::-1]
            theta = h
        if cfg.head == "stick-breaking":
            theta, ld = stick_breaking(theta)
            logdet = logdet + ld
        return theta, logdet

    def _raw_np(self, mlp, x):
        return mlp.np_forward(x)

    def _spline_layer_np(self, layer, eta, h):
        cfg = self.config
        n = h.shape[0]
        ld = np.zeros(n)
        if cfg.kind == "rqnsf-ar":
            out = np.empty_like(h)
            for i in range(cfg.dim):
                cond_in = eta if i == 0 else np.concatenate([h[:, :i], eta], axis=1)
                raw = self._raw_np(self._cond[layer][i], cond_in)
                knots = splines.spline_params_np(raw, cfg.bins, cfg.halfwidth, cfg.envelope)
                out[:, i], ldi = splines.spline_forward_np(h[:, i], knots, cfg.bins, cfg.halfwidth)
                ld += ldi
            return out, ld
        p = self._split
        n_spline = 3 * cfg.bins - 1
        cond_in = eta if p == 0 else np.concatenate([h[:, :p], eta], axis=1)
        raw_all = self._raw_np(self._cond[layer], cond_in)
        out = h.copy()
        for j in range(cfg.dim - p):
            raw = raw_all[:, j * n_spline:(j + 1) * n_spline]
            knots = splines.spline_params_np(raw, cfg.bins, cfg.halfwidth, cfg.envelope)
            out[:, p + j], ldj = splines.spline_forward_np(h[:, p + j], knots, cfg.bins, cfg.halfwidth)
            ld += ldj
        return out, ld

    def _umnn_forward_np(self, eta, z_col):
        cfg = self.config
        q = cfg.quadrature_order
        n = eta.shape[0]
        t_quad = z_col[:, None] * (self._quad_nodes + 1.0) / 2.0
        w_quad = (z_col[:, None] / 2.0) * self._quad_weights
        eta_rep = np.repeat(eta, q, axis=0)
        quad_in = np.concatenate([eta_rep, t_quad.reshape(-1, 1)], axis=1)
        last_in = np.concatenate([eta, z_col[:, None]], axis=1)
        g = self._logderiv_net.np_forward(np.concatenate([quad_in, last_in], axis=0))
        if cfg.envelope is not None:
            _, a_star, b_star = cfg.envelope
            t_all = np.concatenate([t_quad.reshape(-1, 1), z_col[:, None]], axis=0)
            bound = a_star + b_star * np.abs(t_all)
            g = np.clip(g, -bound, bound)
        g_quad = g[:n * q, 0].reshape(n, q)
        g_last = g[n * q:, 0]
        a_out = self._median_net.np_forward(eta)[:, 0]
        if cfg.envelope is not None:
            a_out = np.clip(a_out, -cfg.envelope[0], cfg.envelope[0])
        theta = a_out + np.sum(np.exp(g_quad) * w_quad, axis=1)
        return theta[:, None], g_last

    # -- scalar-output inversion (density evaluation) -------------------------

    def inverse_1d(self, eta_row, x, tol=1e-10):
        """Invert the flow at a single conditioning value, for dim == 1.

        Returns (z, log-derivative of the inverse, in-image mask). Spline
        flows invert analytically; the integration flow bisects to `tol`.
        """
        cfg = self.config
        if cfg.dim != 1 or cfg.head != "identity":
            raise ValueError("inverse_1d needs a scalar flow with identity head")
        eta_row = np.asarray(eta_row, dtype=np.float64).reshape(1, -1)
        x = np.asarray(x, dtype=np.float64)
        m = x.shape[0]
        if cfg.kind == "umnn":
            return self._umnn_inverse(eta_row, x, tol)
        cur = x.copy()
        logdet_inv = np.zeros(m)
        for layer in reversed(range(cfg.layers)):
            mlp = self._cond[layer][0] if cfg.kind == "rqnsf-ar" else self._cond[layer]
            raw = self._raw_np(mlp, eta_row)
            knots = splines.spline_params_np(raw, cfg.bins, cfg.halfwidth, cfg.envelope)
            knots = tuple(np.repeat(k, m, axis=0) for k in knots)
            cur, ld = splines.spline_inverse_np(cur, knots, cfg.bins, cfg.halfwidth)
            logdet_inv += ld
        return cur, logdet_inv, np.ones(m, dtype=bool)

    def _umnn_inverse(self, eta_row, x, tol):
        m = x.shape[0]

        def t_of(z_vals):
            eta = np.repeat(eta_row, z_vals.shape[0], axis=0)
            theta, _ = self._umnn_forward_np(eta, z_vals)
            return theta[:, 0]

        lo, hi = -8.0, 8.0
        while t_of(np.array([lo])) [0] > x.min() and lo > -120.0:
            lo *= 2.0
        while t_of(np.array([hi]))[0] < x.max() and hi < 120.0:
            hi *= 2.0
        in_image = (x >= t_of(np.array([lo]))[0]) & (x <= t_of(np.array([hi]))[0])
        z_lo = np.full(m, lo)
        z_hi = np.full(m, hi)
        while np.max(z_hi - z_lo) > tol:
            mid = 0.5 * (z_lo + z_hi)
            t_mid = t_of(mid)
            go_right = t_mid < x
            z_lo = np.where(go_right, mid, z_lo)
            z_hi = np.where(go_right, z_hi, mid)
        z = 0.5 * (z_lo + z_hi)
        eta = np.repeat(eta_row, m, axis=0)
        _, g_last = self._umnn_forward_np(eta, z)
        return z, -g_last, in_image

    def conditional_logpdf_1d(self, eta_row, x):
        """log q(x | eta) for a scalar flow, via inversion + change of variables."""
        z, logdet_inv, in_image = self.inverse_1d(eta_row, x)
        out = self.base_logpdf(z[:, None]) + logdet_inv
        return np.where(in_image, out, -np.inf)
