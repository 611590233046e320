"""Reference posterior sampler for the classification model.

Component-wise Metropolis-within-Gibbs targeting exp(J(z)), run as several
independent chains vectorized together. Proposal scales adapt per
coordinate toward 0.44 acceptance during burn-in and are frozen afterwards
so the kept samples target the exact posterior. This is a validation
oracle for the Laplace approximation, deliberately simple and restricted
to small fixtures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .hpc import HpcModel, softmax_likelihood

__all__ = ["ChainConfig", "McmcResult", "sample_posterior", "predictive_from_chain"]

MAX_DIMENSION = 30
TARGET_ACCEPTANCE = 0.44


@dataclass(frozen=True)
class ChainConfig:
    burn_in: int = 5000
    samples: int = 20_000
    thin: int = 1
    proposal_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1 or self.thin < 1 or self.burn_in < 0:
            raise ValueError("need samples >= 1, thin >= 1, burn_in >= 0")
        if not self.proposal_scale > 0:
            raise ValueError("proposal_scale must be positive")


@dataclass
class McmcResult:
    samples: np.ndarray        # (chains, kept, nC)
    acceptance_rate: float
    psrf: np.ndarray           # potential scale reduction per coordinate
    scales: np.ndarray

    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1])

    def dump_csv(self, path):
        flat = self.flat()
        header = ",".join(f"z{j}" for j in range(flat.shape[1]))
        np.savetxt(path, flat, delimiter=",", header=header, comments="")


def _warp_blocks(model: HpcModel, Z: np.ndarray) -> np.ndarray:
    """Warp a (chains, nC) latent matrix blockwise."""
    F = np.empty_like(Z)
    n = model.n
    for c, t in enumerate(model.block_transforms()):
        F[:, c * n:(c + 1) * n] = t.warp(Z[:, c * n:(c + 1) * n])
    return F


def sample_posterior(model: HpcModel, cfg: ChainConfig, n_chains: int = 4,
                     prior_only: bool = False) -> McmcResult:
    """Run Metropolis-within-Gibbs chains targeting exp(J(z)).

    With prior_only=True the likelihood term is dropped and the target is
    exactly N(0, K), which is how the sampler itself gets validated.
    """
    m = model.size
    if m > MAX_DIMENSION:
        raise ValueError(f"sampler is an oracle for small fixtures (nC <= {MAX_DIMENSION}, got {m})")
    n, C = model.n, model.C
    rng = np.random.default_rng(cfg.seed)
    Kinv = model.Kinv_dense()
    y_flat = model.y_flat
    transforms = model.block_transforms()

    Z = rng.normal(0.0, 0.5, (n_chains, m))
    F = _warp_blocks(model, Z)
    V = Z @ Kinv.T                       # rows: Kinv @ z per chain
    # per-point log-sum-exp over classes, shape (chains, n)
    LSE = logsumexp(F.reshape(n_chains, C, n), axis=1)

    scales = np.full(m, cfg.proposal_scale)
    kept = np.empty((n_chains, cfg.samples, m))
    accept_count = 0
    proposal_count = 0
    batch_acc = np.zeros(m)
    batch_count = 0
    adapt_round = 0

    total_sweeps = cfg.burn_in + cfg.samples * cfg.thin
    kept_idx = 0
    for sweep in range(total_sweeps):
        adapting = sweep < cfg.burn_in
        noise = rng.standard_normal((m, n_chains))
        logu = np.log(rng.random((m, n_chains)))
        # coordinate j is only modified at its own step, so all proposals of
        # the sweep can be formed (and warped) in one vectorized pass
        Z_prop = Z + noise.T * scales
        F_prop = None if prior_only else _warp_blocks(model, Z_prop)
        for j in range(m):
            c, i = divmod(j, n)
            z_new = Z_prop[:, j]
            delta = scales[j] * noise[j]
            # prior part: -(2 delta v_j + Kinv_jj delta^2) / 2
            dlog = -(2.0 * delta * V[:, j] + Kinv[j, j] * delta * delta) * 0.5
            if not prior_only:
                f_new = F_prop[:, j]
                # point i log-sum-exp with class c replaced
                fi = F[:, i::n].copy()       # (chains, C) values at point i
                fi[:, c] = f_new
                mx = fi.max(axis=1)
                lse_new = np.log(np.exp(fi - mx[:, None]).sum(axis=1)) + mx
                dlog += y_flat[j] * (f_new - F[:, j]) - (lse_new - LSE[:, i])
            acc = logu[j] < dlog
            if np.any(acc):
                Z[acc, j] = z_new[acc]
                V[acc] += np.outer(delta[acc], Kinv[j])
                if not prior_only:
                    F[acc, j] = f_new[acc]
                    LSE[acc, i] = lse_new[acc]
            if adapting:
                batch_acc[j] += acc.mean()
            else:
                accept_count += int(acc.sum())
                proposal_count += n_chains
        if adapting:
            batch_count += 1
            if batch_count == 50:
                adapt_round += 1
                rate = batch_acc / batch_count
                delta_log = min(0.1, 1.0 / math.sqrt(adapt_round))
                scales *= np.exp(np.where(rate > TARGET_ACCEPTANCE, delta_log, -delta_log))
                batch_acc[:] = 0.0
                batch_count = 0
        else:
            if (sweep - cfg.burn_in + 1) % cfg.thin == 0:
                kept[:, kept_idx] = Z
                kept_idx += 1

    acceptance = accept_count / max(proposal_count, 1)
    if acceptance < 0.01:
        raise RuntimeError(f"pathological acceptance rate {acceptance:.4f} after adaptation")
    return McmcResult(samples=kept, acceptance_rate=float(acceptance),
                      psrf=_psrf(kept), scales=scales)


def _psrf(samples: np.ndarray) -> np.ndarray:
    """Gelman-Rubin potential scale reduction factor per coordinate."""
    m_chains, n_samples, dim = samples.shape
    means = samples.mean(axis=1)
    variances = samples.var(axis=1, ddof=1)
    B = n_samples * means.var(axis=0, ddof=1)
    W = variances.mean(axis=0)
    var_plus = (n_samples - 1) / n_samples * W + B / n_samples
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(var_plus / W)


def predictive_from_chain(model: HpcModel, samples: np.ndarray, k_star_blocks, k_ss,
                          seed: int = 0):
    """Predictive class probabilities averaged over posterior draws.

    For each retained z draw, z_* is sampled from the exact Gaussian
    conditional p(z_*|z) per class block, warped, and pushed through the
    softmax; the average estimates the predictive expectation. Returns
    (probs, standard_error).
    """
    Z = samples.reshape(-1, model.size) if samples.ndim == 3 else np.asarray(samples, dtype=float)
    n, C = model.n, model.C
    rng = np.random.default_rng(seed)
    mean = np.zeros((len(Z), C))
    sd = np.zeros(C)
    for c in range(C):
        a = np.linalg.solve(model.kernel_blocks()[c], np.asarray(k_star_blocks[c], dtype=float))
        mean[:, c] = Z[:, c * n:(c + 1) * n] @ a
        sd[c] = math.sqrt(max(float(k_ss[c] - k_star_blocks[c] @ a), 0.0))
    z_star = mean + rng.standard_normal(mean.shape) * sd
    f_star = np.empty_like(z_star)
    for c, t in enumerate(model.block_transforms()):
        f_star[:, c] = t.warp(z_star[:, c])
    probs = softmax_likelihood(f_star)
    return probs.mean(axis=0), probs.std(axis=0, ddof=1) / math.sqrt(len(Z))
