"""Gaussian process posterior and predictive computations in z-space.

This is the shared linear-algebra engine: the regression posterior at a
training location, the predictive distribution at a test point, and
Cholesky solves with a jitter retry ladder. Everything here is exact
Gaussian conditioning; the heavy-tailed machinery only ever talks to it
through transformed observations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "GaussianPosterior",
    "CholeskyError",
    "chol_factor",
    "chol_solve",
    "gp_posterior_at_training",
    "gp_predict",
]

JITTERS = (0.0, 1e-10, 1e-8, 1e-6)


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a kernel matrix stays non-positive-definite after the
    jitter retry ladder."""


@dataclass(frozen=True)
class GaussianPosterior:
    """Gaussian posterior/predictive with scalar mean and variance."""

    mean: float
    variance: float


def chol_factor(K: np.ndarray):
    """Lower-triangular Cholesky factor of K with jitter retries.

    Tries jitters 0, 1e-10, 1e-8, 1e-6 on the diagonal before giving up.
    Returns the (factor, lower) pair used by scipy.linalg.cho_solve.
    """
    K = np.asarray(K, dtype=float)
    for jitter in JITTERS:
        try:
            return cho_factor(K + jitter * np.eye(len(K)) if jitter else K, lower=True)
        except np.linalg.LinAlgError:
            continue
    raise CholeskyError(f"matrix of size {K.shape} not positive definite after jitter retries {JITTERS[1:]}")


def chol_solve(factor, b: np.ndarray) -> np.ndarray:
    return cho_solve(factor, np.asarray(b, dtype=float))


def gp_posterior_at_training(K_tilde: np.ndarray, K: np.ndarray, y: np.ndarray, i: int) -> GaussianPosterior:
    """Posterior of the latent value at training location i given noisy y.

    mean = K_tilde[i] @ K^{-1} y and
    variance = K[i, i] - K_tilde[i] @ K^{-1} @ K_tilde[:, i].
    """
    K_tilde = np.asarray(K_tilde, dtype=float)
    K = np.asarray(K, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) != len(K):
        raise ValueError(f"length of y ({len(y)}) does not match K ({len(K)})")
    factor = chol_factor(K)
    row = K_tilde[i]
    mean = float(row @ chol_solve(factor, y))
    var = float(K[i, i] - row @ chol_solve(factor, K_tilde[:, i]))
    return GaussianPosterior(mean, max(var, 0.0))


def gp_predict(K: np.ndarray, k_star: np.ndarray, k_ss: float, z_obs: np.ndarray) -> GaussianPosterior:
    """Predictive N(mu_*, Sigma_*) at a test point.

    mu_* = k_star @ K^{-1} z_obs and Sigma_* = k_ss - k_star @ K^{-1} k_star,
    clipped into [0, k_ss].
    """
    K = np.asarray(K, dtype=float)
    k_star = np.asarray(k_star, dtype=float)
    z_obs = np.asarray(z_obs, dtype=float)
    factor = chol_factor(K)
    mean = float(k_star @ chol_solve(factor, z_obs))
    var = float(k_ss - k_star @ chol_solve(factor, k_star))
    return GaussianPosterior(mean, min(max(var, 0.0), float(k_ss)))
