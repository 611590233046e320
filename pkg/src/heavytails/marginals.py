"""Symmetric heavy-tailed marginal families and the Gaussian-copula warp.

Four scale families are supported: Laplace, hyperbolic secant, a
Student-t-inspired family with closed-form c.d.f., and Gaussian. Each has
density ``g_b(x) = g_1(x / b) / b`` symmetric about the origin with scale
``b > 0``. The copula warp maps a latent Gaussian value z to the
heavy-tailed scale through ``f = G_b^{-1}(Phi_{0, sigma2}(z))``; its inverse
and the derivatives needed for mode finding and scale learning are provided
here. Tail evaluation is done through log-space survival functions so the
composition stays accurate far beyond the point where ``Phi(z)`` saturates
in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri, ndtri_exp

__all__ = [
    "FAMILIES",
    "MarginalSpec",
    "CopulaTransform",
    "pdf",
    "log_pdf",
    "cdf",
    "log_sf",
    "quantile",
    "dlog_pdf",
    "d2log_pdf",
    "warp",
    "unwarp",
    "warp_derivatives",
]

FAMILIES = ("laplace", "hypsec", "student_t2", "gaussian")

_LOG2 = math.log(2.0)
_LOG_HALF = math.log(0.5)
_LOG_2_OVER_PI = math.log(2.0 / math.pi)
# Below this log-probability the closed tail formulas would underflow and we
# switch to their asymptotic log-space forms (relative error < 1e-15 there).
_LOG_TINY = math.log(1e-290)


@dataclass(frozen=True)
class MarginalSpec:
    """A symmetric marginal distribution family with scale parameter b."""

    family: str
    b: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown marginal family {self.family!r}; expected one of {FAMILIES}")
        if not (np.isfinite(self.b) and self.b > 0):
            raise ValueError(f"marginal scale b must be positive and finite, got {self.b}")

    def with_b(self, b: float) -> "MarginalSpec":
        return MarginalSpec(self.family, float(b))


def _ret(x_in, out):
    return out.item() if np.ndim(out) == 0 and np.ndim(x_in) == 0 else out


def _logcosh(t):
    t = np.abs(t)
    return t + np.log1p(np.exp(-2.0 * t)) - _LOG2


def log_pdf(m: MarginalSpec, x):
    """Log density log g_b(x)."""
    x = np.asarray(x, dtype=float)
    b = m.b
    if m.family == "laplace":
        out = -np.abs(x) / b - math.log(2.0 * b)
    elif m.family == "hypsec":
        out = -_logcosh(0.5 * math.pi * x / b) - math.log(2.0 * b)
    elif m.family == "student_t2":
        out = -1.5 * np.log(2.0 + (x / b) ** 2) - math.log(b)
    else:  # gaussian
        out = -0.5 * (x / b) ** 2 - math.log(b) - 0.5 * math.log(2.0 * math.pi)
    return _ret(x, out)


def pdf(m: MarginalSpec, x):
    """Density g_b(x)."""
    return _ret(x, np.exp(np.asarray(log_pdf(m, x))))


def cdf(m: MarginalSpec, x):
    """Distribution function G_b(x), evaluated through the nearer tail."""
    x = np.asarray(x, dtype=float)
    b = m.b
    if m.family == "laplace":
        out = np.where(x <= 0, 0.5 * np.exp(np.minimum(x, 0.0) / b),
                       1.0 - 0.5 * np.exp(-np.maximum(x, 0.0) / b))
    elif m.family == "hypsec":
        t = 0.5 * math.pi * x / b
        lo = (2.0 / math.pi) * np.arctan(np.exp(np.minimum(t, 0.0)))
        hi = 1.0 - (2.0 / math.pi) * np.arctan(np.exp(-np.maximum(t, 0.0)))
        out = np.where(x <= 0, lo, hi)
    elif m.family == "student_t2":
        out = 0.5 + x / (2.0 * np.hypot(x, math.sqrt(2.0) * b))
    else:
        out = ndtr(x / b)
    return _ret(x, out)


def log_sf(m: MarginalSpec, x):
    """Log survival function log(1 - G_b(x)); exact in the upper tail."""
    x = np.asarray(x, dtype=float)
    pos = np.abs(x)
    b = m.b
    if m.family == "laplace":
        ls = _LOG_HALF - pos / b
    elif m.family == "hypsec":
        t = 0.5 * math.pi * pos / b
        with np.errstate(divide="ignore"):
            direct = np.log(np.arctan(np.exp(-t))) + _LOG_2_OVER_PI
        ls = np.where(t > 700.0, _LOG_2_OVER_PI - t, direct)
    elif m.family == "student_t2":
        s = np.hypot(pos, math.sqrt(2.0) * b)
        ls = 2.0 * math.log(b) - np.log(s) - np.log(s + pos)
    else:
        ls = log_ndtr(-pos / b)
    # reflect for negative arguments: S(x) = 1 - S(-x)
    out = np.where(x >= 0, ls, np.log1p(-np.exp(np.minimum(ls, -1e-300))))
    return _ret(x, out)


def _isf_exp(m: MarginalSpec, log_q):
    """Upper-tail quantile from log tail probability: x with 1 - G_b(x) = exp(log_q).

    Valid for log_q <= log(1/2); returns a nonnegative value.
    """
    lq = np.asarray(log_q, dtype=float)
    b = m.b
    if m.family == "laplace":
        return -b * (lq + _LOG2)
    if m.family == "gaussian":
        return -b * ndtri_exp(lq)
    if m.family == "hypsec":
        q = np.exp(np.maximum(lq, _LOG_TINY))
        with np.errstate(divide="ignore"):
            direct = -(2.0 * b / math.pi) * np.log(np.tan(0.5 * math.pi * q))
        asym = -(2.0 * b / math.pi) * (math.log(0.5 * math.pi) + lq)
        return np.where(lq > _LOG_TINY, direct, asym)
    # student_t2
    q = np.exp(np.maximum(lq, _LOG_TINY))
    with np.errstate(divide="ignore", over="ignore"):
        direct = b * (1.0 - 2.0 * q) / np.sqrt(2.0 * q * (1.0 - q))
        asym = b * np.exp(-0.5 * (_LOG2 + lq))
    return np.where(lq > _LOG_TINY, direct, asym)


def quantile(m: MarginalSpec, u):
    """Inverse c.d.f. G_b^{-1}(u) for u in (0, 1)."""
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0.0) | (u >= 1.0)) or not np.all(np.isfinite(u)):
        raise ValueError("quantile requires 0 < u < 1")
    with np.errstate(divide="ignore"):
        lower = -_isf_exp(m, np.log(np.minimum(u, 0.5)))
        upper = _isf_exp(m, np.log1p(-np.maximum(u, 0.5)))
    out = np.where(u <= 0.5, lower, upper)
    return _ret(u, out)


def dlog_pdf(m: MarginalSpec, x):
    """First derivative of log g_b at x (the score in x)."""
    x = np.asarray(x, dtype=float)
    b = m.b
    if m.family == "laplace":
        out = -np.sign(x) / b
    elif m.family == "hypsec":
        c = 0.5 * math.pi / b
        out = -c * np.tanh(c * x)
    elif m.family == "student_t2":
        out = -3.0 * x / (2.0 * b * b + x * x)
    else:
        out = -x / (b * b)
    return _ret(x, out)


def d2log_pdf(m: MarginalSpec, x):
    """Second derivative of log g_b at x."""
    x = np.asarray(x, dtype=float)
    b = m.b
    if m.family == "laplace":
        out = np.zeros_like(x)
    elif m.family == "hypsec":
        c = 0.5 * math.pi / b
        out = -c * c * np.exp(-2.0 * _logcosh(c * x))
    elif m.family == "student_t2":
        d = 2.0 * b * b + x * x
        out = 3.0 * (x * x - 2.0 * b * b) / (d * d)
    else:
        out = np.full_like(x, -1.0 / (b * b))
    return _ret(x, out)


@dataclass(frozen=True)
class CopulaTransform:
    """The monotone warp f = G_b^{-1}(Phi_{0, sigma2}(z)) and its inverse.

    The warp is odd and strictly increasing; sigma2 is the variance of the
    Gaussian c.d.f. used on the latent side. Both directions are computed
    through the tail complement in log space, which keeps the composition
    accurate for |z| far beyond 8 where Phi(z) is indistinguishable from 1
    in double precision.
    """

    marginal: MarginalSpec
    sigma2: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"copula variance sigma2 must be positive, got {self.sigma2}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    def with_b(self, b: float) -> "CopulaTransform":
        return CopulaTransform(self.marginal.with_b(b), self.sigma2)

    def warp(self, z):
        """Map latent z to f-space: G_b^{-1}(Phi_{0, sigma2}(z))."""
        z = np.asarray(z, dtype=float)
        lq = log_ndtr(-np.abs(z) / self.sigma)
        out = np.sign(z) * _isf_exp(self.marginal, lq)
        return _ret(z, out)

    def unwarp(self, f):
        """Map f back to latent space: Phi_{0, sigma2}^{-1}(G_b(f))."""
        f = np.asarray(f, dtype=float)
        ls = log_sf(self.marginal, np.abs(f))
        out = -self.sigma * np.sign(f) * ndtri_exp(ls)
        return _ret(f, out)

    def warp_jet(self, z):
        """Return (f, df/dz, d2f/dz2, d3f/dz3) at z.

        Derivatives follow from differentiating G_b(f) = Phi(z): with
        l(f) = log g_b(f),
            f'   = phi_sigma(z) / g_b(f)
            f''  = f' * s,              s = -z/sigma2 - l'(f) f'
            f''' = f' * (s' + s^2),     s' = -1/sigma2 - l''(f) f'^2 - l'(f) f''.
        The first derivative is assembled in log space to avoid 0/0 in the
        tails.
        """
        z = np.asarray(z, dtype=float)
        f = np.asarray(self.warp(z), dtype=float)
        log_phi = -0.5 * (z / self.sigma) ** 2 - math.log(self.sigma) - 0.5 * math.log(2.0 * math.pi)
        d1 = np.exp(log_phi - np.asarray(log_pdf(self.marginal, f)))
        lp1 = np.asarray(dlog_pdf(self.marginal, f))
        lp2 = np.asarray(d2log_pdf(self.marginal, f))
        s = -z / self.sigma2 - lp1 * d1
        d2 = d1 * s
        sp = -1.0 / self.sigma2 - lp2 * d1 * d1 - lp1 * d2
        d3 = d1 * (sp + s * s)
        return f, d1, d2, d3

    def warp_derivatives(self, z):
        """Return (df/dz, d2f/dz2, df/db) at z.

        df/db uses the scale-family identity G_b^{-1}(u) = b G_1^{-1}(u),
        which gives df/db = f/b exactly for every supported family.
        """
        z = np.asarray(z, dtype=float)
        f, d1, d2, _ = self.warp_jet(z)
        db = f / self.marginal.b
        return _ret(z, d1), _ret(z, d2), _ret(z, db)


def warp(t: CopulaTransform, z):
    return t.warp(z)


def unwarp(t: CopulaTransform, f):
    return t.unwarp(f)


def warp_derivatives(t: CopulaTransform, z):
    return t.warp_derivatives(z)
