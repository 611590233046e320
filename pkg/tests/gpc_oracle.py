"""Reference multiclass Gaussian process classifier with Laplace inference.

Independent oracle for the Gaussian-marginal degeneracy checks: Newton
iteration on the latent values themselves (no warp machinery), the
|I + W^{1/2} K W^{1/2}| evidence form, and a two-stage sampling predictive.
Kept deliberately separate from the package code paths.
"""

import numpy as np
from scipy.linalg import block_diag


def _softmax_rows(F):
    E = np.exp(F - F.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


class GpcOracle:
    def __init__(self, K_blocks, y):
        self.Ks = [np.asarray(K, dtype=float) for K in K_blocks]
        self.y = np.asarray(y, dtype=float)
        self.n, self.C = self.y.shape
        self.K = block_diag(*self.Ks)
        self.Kinv = np.linalg.inv(self.K)
        self.y_flat = self.y.T.ravel()

    def pi(self, f):
        P = _softmax_rows(f.reshape(self.C, self.n).T)
        return P.T.ravel()

    def W(self, f):
        n, C = self.n, self.C
        P = self.pi(f).reshape(C, n)
        W = np.zeros((n * C, n * C))
        idx = np.arange(n)
        for c in range(C):
            for d in range(C):
                val = -P[c] * P[d]
                if c == d:
                    val = val + P[c]
                W[c * n + idx, d * n + idx] = val
        return W

    def objective(self, f):
        F = f.reshape(self.C, self.n)
        lse = np.log(np.sum(np.exp(F - F.max(axis=0)), axis=0)) + F.max(axis=0)
        return float(self.y_flat @ f - lse.sum() - 0.5 * f @ self.Kinv @ f
                     - 0.5 * np.linalg.slogdet(self.K)[1])

    def mode(self, tol=1e-10, max_iter=200):
        """Newton iteration f <- (K^{-1} + W)^{-1} (W f + y - pi)."""
        f = np.zeros(self.n * self.C)
        for _ in range(max_iter):
            pi = self.pi(f)
            W = self.W(f)
            rhs = W @ f + self.y_flat - pi
            f_new = np.linalg.solve(self.Kinv + W, rhs)
            if np.max(np.abs(f_new - f)) < tol:
                f = f_new
                break
            f = f_new
        return f

    def evidence(self, f_hat):
        """RW Eq. 3.44 form with |I + W^{1/2} K W^{1/2}|."""
        F = f_hat.reshape(self.C, self.n)
        lse = np.log(np.sum(np.exp(F - F.max(axis=0)), axis=0)) + F.max(axis=0)
        W = self.W(f_hat)
        vals, vecs = np.linalg.eigh(W)
        Wsqrt = vecs @ np.diag(np.sqrt(np.maximum(vals, 0.0))) @ vecs.T
        B = np.eye(self.n * self.C) + Wsqrt @ self.K @ Wsqrt
        return float(-0.5 * f_hat @ self.Kinv @ f_hat + self.y_flat @ f_hat - lse.sum()
                     - 0.5 * np.linalg.slogdet(B)[1])

    def predict(self, f_hat, k_star_blocks, k_ss, samples=200_000, seed=0):
        """Two-stage sampling: f ~ q(f|y), then f_* ~ p(f_*|f), then softmax."""
        rng = np.random.default_rng(seed)
        W = self.W(f_hat)
        cov = np.linalg.inv(self.Kinv + W)
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        L = vecs * np.sqrt(np.maximum(vals, 0.0))
        f_draws = f_hat + rng.standard_normal((samples, self.n * self.C)) @ L.T
        means = np.zeros((samples, self.C))
        sds = np.zeros(self.C)
        for c in range(self.C):
            a = np.linalg.solve(self.Ks[c], np.asarray(k_star_blocks[c], dtype=float))
            means[:, c] = f_draws[:, c * self.n:(c + 1) * self.n] @ a
            sds[c] = np.sqrt(max(k_ss[c] - k_star_blocks[c] @ a, 0.0))
        f_star = means + rng.standard_normal((samples, self.C)) * sds
        return _softmax_rows(f_star).mean(axis=0)
