"""Kernel functions, kernel-matrix assembly, and analytic parameter gradients.

The primary kernel is a von Mises-inspired covariance for d-dimensional
angular data,

    k(x_i, x_j) = sigma2 * exp(lam * (sum_k cos(x_ik - x_jk) - d)),

which is positive semidefinite on the torus. A squared-exponential kernel is
included for non-angular synthetic data. Assembled matrices carry an additive
noise term on the diagonal, K = K_tilde + eps * I, with a small floor on eps
so the matrix stays invertible when the noise is driven to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["KernelSpec", "NOISE_FLOOR", "kernel_eval", "kernel_cross", "kernel_matrix", "kernel_gradients"]

KERNEL_FAMILIES = ("von_mises", "squared_exponential")

NOISE_FLOOR = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family with amplitude sigma2, inverse length-scale lam, and
    diagonal noise."""

    family: str = "von_mises"
    sigma2: float = 1.0
    lam: float = 1.0
    noise: float = 1e-2

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {KERNEL_FAMILIES}")
        if self.sigma2 < 0 or self.lam < 0 or self.noise < 0:
            raise ValueError("kernel parameters sigma2, lam, noise must be nonnegative")

    def replace(self, **kw) -> "KernelSpec":
        merged = {"family": self.family, "sigma2": self.sigma2, "lam": self.lam, "noise": self.noise}
        merged.update(kw)
        return KernelSpec(**merged)


def _as_points(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return x


def _log_corr(k: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """lam-scaled log correlation between point sets a (m,d) and b (n,d)."""
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if k.family == "von_mises":
        d = a.shape[1]
        delta = a[:, None, :] - b[None, :, :]
        return k.lam * (np.cos(delta).sum(axis=2) - d)
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return -0.5 * k.lam * sq


def kernel_eval(k: KernelSpec, x_i, x_j):
    """Evaluate k(x_i, x_j) for single points."""
    a, b = _as_points(x_i), _as_points(x_j)
    return float(k.sigma2 * np.exp(_log_corr(k, a, b))[0, 0])


def kernel_cross(k: KernelSpec, X1, X2) -> np.ndarray:
    """Noise-free cross-covariance matrix K_tilde(X1, X2)."""
    return k.sigma2 * np.exp(_log_corr(k, _as_points(X1), _as_points(X2)))


def kernel_matrix(k: KernelSpec, X, include_noise: bool = True) -> np.ndarray:
    """Assemble K = K_tilde + eps*I over locations X (rows are points).

    With include_noise=False the noise-free K_tilde is returned. The
    effective eps is floored at NOISE_FLOOR so K is always invertible.
    """
    X = _as_points(X)
    K = kernel_cross(k, X, X)
    K = 0.5 * (K + K.T)
    if include_noise:
        K = K + max(k.noise, NOISE_FLOOR) * np.eye(len(X))
    return K


def kernel_gradients(k: KernelSpec, X) -> dict:
    """Entrywise derivatives of kernel_matrix(k, X) for each parameter.

    Returns {"sigma2": dK/dsigma2, "lam": dK/dlam, "noise": dK/deps}.
    """
    X = _as_points(X)
    n = len(X)
    lc = _log_corr(k, X, X)
    lc = 0.5 * (lc + lc.T)
    corr = np.exp(lc)
    K_tilde = k.sigma2 * corr
    # lc is lam * (log-correlation shape); its lam-derivative is lc / lam,
    # well defined as the shape itself when lam == 0.
    if k.lam > 0:
        shape = lc / k.lam
    else:
        shape = _log_corr(k.replace(lam=1.0), X, X)
        shape = 0.5 * (shape + shape.T)
    return {
        "sigma2": corr,
        "lam": K_tilde * shape,
        "noise": np.eye(n),
    }
