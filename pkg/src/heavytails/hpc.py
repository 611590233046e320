"""Multiclass heavy-tailed process classification with Laplace inference.

The model places C independent heavy-tailed process priors on nC latent
values (class-major layout: index c*n + i), ties them to 1-of-C labels
through a softmax likelihood on the warped values f = warp(z), and performs
inference in z-space. Because the warp makes the log posterior non-concave,
the mode is found with a preconditioned gradient ascent rather than Newton
steps. Hyperparameters (kernel parameters and the marginal scale b) are
learned by ascending a Laplace approximation of the log marginal
likelihood, with the mode's dependence on the parameters handled through
implicit differentiation of the stationarity condition
z = K diag(df/dz) (y - pi).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .kernels import KernelSpec, kernel_cross, kernel_eval, kernel_gradients, kernel_matrix, NOISE_FLOOR
from .marginals import CopulaTransform

__all__ = [
    "HpcModel",
    "LaplaceState",
    "FitConfig",
    "FitResult",
    "PredictiveResult",
    "ConvergenceError",
    "IndefiniteHessianError",
    "softmax_likelihood",
    "log_posterior",
    "posterior_derivatives",
    "find_mode",
    "laplace_predict",
    "laplace_predict_from_cov",
    "log_marginal_likelihood",
    "evidence_gradients",
    "fit",
    "model_to_dict",
    "model_from_dict",
]

KERNEL_PARAMS = ("sigma2", "lam", "noise")

# centers of the l2 penalty on log-parameters; also the fit initialization
PRIOR_CENTERS = {"sigma2": 1.0, "lam": 1.0, "noise": 0.1, "b": 1.0}


class ConvergenceError(RuntimeError):
    """Mode search or hyperparameter ascent failed to converge."""


class IndefiniteHessianError(RuntimeError):
    """-grad^2 J at the accepted mode is not positive definite."""


def softmax_likelihood(f_i):
    """Softmax class probabilities for one or many C-vectors (last axis)."""
    f_i = np.asarray(f_i, dtype=float)
    out = np.exp(f_i - logsumexp(f_i, axis=-1, keepdims=True))
    return out


@dataclass
class HpcModel:
    """Heavy-tailed process classifier specification plus training data.

    Kernel blocks are either assembled from `kernels` (one KernelSpec per
    class) over locations X, or supplied directly through `blocks` for
    fixed-matrix experiments. `transform` carries the shared marginal scale
    b; `per_block_b` optionally overrides b per class block.
    """

    y: np.ndarray
    transform: CopulaTransform
    X: np.ndarray | None = None
    kernels: tuple[KernelSpec, ...] | None = None
    blocks: tuple[np.ndarray, ...] | None = None
    per_block_b: tuple[float, ...] | None = None
    regularizer: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 2 or self.y.shape[1] < 2:
            raise ValueError("y must be (n, C) one-hot with C >= 2")
        if not (np.all((self.y == 0) | (self.y == 1)) and np.all(self.y.sum(axis=1) == 1)):
            raise ValueError("each row of y must be one-hot")
        if self.blocks is None:
            if self.kernels is None or self.X is None:
                raise ValueError("HpcModel needs kernel blocks, or kernels together with X")
            if isinstance(self.kernels, KernelSpec):
                self.kernels = (self.kernels,) * self.C
            else:
                self.kernels = tuple(self.kernels)
            if len(self.kernels) == 1:
                self.kernels = self.kernels * self.C
            if len(self.kernels) != self.C:
                raise ValueError(f"need one kernel per class ({self.C}), got {len(self.kernels)}")
            self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        else:
            self.blocks = tuple(np.asarray(B, dtype=float) for B in self.blocks)
            if len(self.blocks) != self.C:
                raise ValueError(f"need one block per class ({self.C}), got {len(self.blocks)}")
            for B in self.blocks:
                if B.shape != (self.n, self.n):
                    raise ValueError("each block must be n x n")
        if self.per_block_b is not None:
            self.per_block_b = tuple(float(b) for b in self.per_block_b)
            if len(self.per_block_b) != self.C:
                raise ValueError("per_block_b must give one scale per class")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def C(self) -> int:
        return self.y.shape[1]

    @property
    def size(self) -> int:
        return self.n * self.C

    @property
    def y_flat(self) -> np.ndarray:
        # class-major: (y^1_1..y^1_n, y^2_1..., ...)
        return self.y.T.ravel()

    def block_transforms(self) -> list[CopulaTransform]:
        if self.per_block_b is None:
            return [self.transform] * self.C
        return [self.transform.with_b(b) for b in self.per_block_b]

    def kernel_blocks(self) -> list[np.ndarray]:
        if "blocks" not in self._cache:
            if self.blocks is not None:
                self._cache["blocks"] = [np.asarray(B, float) for B in self.blocks]
            elif all(k == self.kernels[0] for k in self.kernels):
                self._cache["blocks"] = [kernel_matrix(self.kernels[0], self.X)] * self.C
            else:
                self._cache["blocks"] = [kernel_matrix(k, self.X) for k in self.kernels]
        return self._cache["blocks"]

    def _factors(self):
        if "factors" not in self._cache:
            factors: dict[int, object] = {}
            out = []
            for B in self.kernel_blocks():
                key = id(B)
                if key not in factors:
                    factors[key] = cho_factor(B, lower=True)
                out.append(factors[key])
            self._cache["factors"] = out
        return self._cache["factors"]

    def solve_K(self, v: np.ndarray) -> np.ndarray:
        """Blockwise K^{-1} v for a flat class-major vector."""
        n = self.n
        out = np.empty_like(v)
        for c, fac in enumerate(self._factors()):
            out[c * n:(c + 1) * n] = cho_solve(fac, v[c * n:(c + 1) * n])
        return out

    def mul_K(self, v: np.ndarray) -> np.ndarray:
        n = self.n
        out = np.empty_like(v)
        for c, B in enumerate(self.kernel_blocks()):
            out[c * n:(c + 1) * n] = B @ v[c * n:(c + 1) * n]
        return out

    def logdet_K(self) -> float:
        if "logdet" not in self._cache:
            self._cache["logdet"] = float(sum(2.0 * np.sum(np.log(np.diag(f[0]))) for f in self._factors()))
        return self._cache["logdet"]

    def Kinv_dense(self) -> np.ndarray:
        if "Kinv" not in self._cache:
            n, m = self.n, self.size
            out = np.zeros((m, m))
            for c, fac in enumerate(self._factors()):
                out[c * n:(c + 1) * n, c * n:(c + 1) * n] = cho_solve(fac, np.eye(n))
            self._cache["Kinv"] = out
        return self._cache["Kinv"]

    def warp_jets(self, z: np.ndarray):
        """(f, df/dz, d2f/dz2, d3f/dz3) blockwise over a flat vector."""
        n = self.n
        f = np.empty_like(z)
        d1 = np.empty_like(z)
        d2 = np.empty_like(z)
        d3 = np.empty_like(z)
        for c, t in enumerate(self.block_transforms()):
            sl = slice(c * n, (c + 1) * n)
            f[sl], d1[sl], d2[sl], d3[sl] = t.warp_jet(z[sl])
        return f, d1, d2, d3

    def pi_from_f(self, f: np.ndarray) -> np.ndarray:
        """Softmax probabilities, flat class-major, from flat f."""
        F = f.reshape(self.C, self.n)
        return softmax_likelihood(F.T).T.ravel()


def _dense_W(pi: np.ndarray, n: int, C: int) -> np.ndarray:
    """W = diag(pi) - Pi Pi^T as a dense nC x nC matrix."""
    P = pi.reshape(C, n)
    W = np.zeros((n * C, n * C))
    idx = np.arange(n)
    for c in range(C):
        for d in range(C):
            val = -P[c] * P[d]
            if c == d:
                val = val + P[c]
            W[c * n + idx, d * n + idx] = val
    return W


def _dW(pi: np.ndarray, dpi: np.ndarray, n: int, C: int) -> np.ndarray:
    """Directional derivative of W for a perturbation dpi of pi."""
    P = pi.reshape(C, n)
    dP = dpi.reshape(C, n)
    M = np.zeros((n * C, n * C))
    idx = np.arange(n)
    for c in range(C):
        for d in range(C):
            val = -(dP[c] * P[d] + P[c] * dP[d])
            if c == d:
                val = val + dP[c]
            M[c * n + idx, d * n + idx] = val
    return M


def _stacked_Pi(pi: np.ndarray, n: int, C: int) -> np.ndarray:
    P = pi.reshape(C, n)
    Pi = np.zeros((n * C, n))
    idx = np.arange(n)
    for c in range(C):
        Pi[c * n + idx, idx] = P[c]
    return Pi


def log_posterior(model: HpcModel, z: np.ndarray) -> float:
    """J(z) = y^T f - sum_i log sum_c exp f_i^c - z^T K^{-1} z / 2 - log|K| / 2."""
    z = np.asarray(z, dtype=float)
    f, _, _, _ = model.warp_jets(z)
    F = f.reshape(model.C, model.n)
    ll = float(model.y_flat @ f) - float(np.sum(logsumexp(F, axis=0)))
    quad = float(z @ model.solve_K(z))
    return ll - 0.5 * quad - 0.5 * model.logdet_K()


def posterior_derivatives(model: HpcModel, z: np.ndarray):
    """Gradient and Hessian of J at z.

    grad J = diag(df/dz)(y - pi) - K^{-1} z
    hess J = diag(d2f/dz2) diag(y - pi) - diag(df/dz) W diag(df/dz) - K^{-1}
    """
    z = np.asarray(z, dtype=float)
    f, d1, d2, _ = model.warp_jets(z)
    pi = model.pi_from_f(f)
    resid = model.y_flat - pi
    grad = d1 * resid - model.solve_K(z)
    W = _dense_W(pi, model.n, model.C)
    hess = np.diag(d2 * resid) - (d1[:, None] * W) * d1[None, :] - model.Kinv_dense()
    hess = 0.5 * (hess + hess.T)
    return grad, hess


class _NegHessian:
    """Factorization of -hess J with eigenvalue clipping fallback."""

    def __init__(self, hessian: np.ndarray, clip: float = 1e-8):
        negH = -0.5 * (hessian + hessian.T)
        self.pd = True
        self.min_eig = None
        try:
            self._fac = cho_factor(negH, lower=True)
            self.logdet = float(2.0 * np.sum(np.log(np.diag(self._fac[0]))))
            self._eig = None
        except np.linalg.LinAlgError:
            self.pd = False
            vals, vecs = np.linalg.eigh(negH)
            self.min_eig = float(vals.min())
            clipped = np.maximum(vals, clip)
            self._eig = (clipped, vecs)
            self.logdet = float(np.sum(np.log(clipped)))
            warnings.warn(
                f"-hess J indefinite at the mode (min eigenvalue {self.min_eig:.3e}); "
                f"clipping to {clip:.0e} for the Laplace covariance",
                RuntimeWarning,
            )

    def solve(self, B: np.ndarray) -> np.ndarray:
        if self._eig is None:
            return cho_solve(self._fac, B)
        vals, vecs = self._eig
        return vecs @ ((vecs.T @ B).T / vals).T

    def eig_diagnostics(self) -> dict:
        if self._eig is None:
            return {"pd": True}
        vals, _ = self._eig
        return {"pd": False, "min_eig": self.min_eig, "clipped_count": int(np.sum(vals == vals.min()))}


@dataclass
class LaplaceState:
    """Converged Laplace fit around the z-space posterior mode."""

    z_hat: np.ndarray
    f_hat: np.ndarray
    pi_hat: np.ndarray
    Pi: np.ndarray
    W: np.ndarray
    hessian: np.ndarray
    converged: bool
    iterations: int
    grad_inf_norm: float
    stationarity_gap: float
    log_marginal: float | None = None
    _neg: _NegHessian | None = field(default=None, repr=False, compare=False)

    def neg_hessian(self) -> _NegHessian:
        if self._neg is None:
            self._neg = _NegHessian(self.hessian)
        return self._neg


def _grad_J(model: HpcModel, z: np.ndarray) -> np.ndarray:
    f, d1, _, _ = model.warp_jets(z)
    pi = model.pi_from_f(f)
    return d1 * (model.y_flat - pi) - model.solve_K(z)


def find_mode(model: HpcModel, z0: np.ndarray | None = None, tol: float = 1e-6,
              max_iter: int = 5000, precondition: bool = True) -> LaplaceState:
    """Ascend J(z) to its mode without ever using the (indefinite) Hessian.

    The opening phase is gradient ascent with Armijo backtracking along the
    K-preconditioned gradient (a fixed positive definite preconditioner, so
    every step is an ascent step); when the objective becomes numerically
    flat a step is instead accepted on gradient-norm contraction. If the
    ascent stalls on a badly scaled ridge, the remaining budget goes to an
    L-BFGS polish on the same objective and gradient. Convergence requires
    both the gradient and the stationarity residual
    z - K diag(df/dz)(y - pi) to fall below tol in max norm.
    """
    m = model.size
    z = np.zeros(m) if z0 is None else np.asarray(z0, dtype=float).copy()
    J = log_posterior(model, z)
    if not np.isfinite(J):
        raise ConvergenceError("log posterior not finite at the starting point")
    step = 1.0
    c_armijo = 1e-4
    iterations = 0
    g_norm = np.inf
    best_g = np.inf
    since_improve = 0
    stalled = False
    for iterations in range(1, max_iter + 1):
        grad = _grad_J(model, z)
        direction = model.mul_K(grad) if precondition else grad
        g_norm = float(np.max(np.abs(grad)))
        # K grad J equals the Eq.-mode residual K diag(f')(y - pi) - z
        stat_gap = float(np.max(np.abs(direction if precondition else model.mul_K(grad))))
        if g_norm <= tol and stat_gap <= tol:
            break
        if g_norm < 0.9 * best_g:
            best_g, since_improve = g_norm, 0
        else:
            since_improve += 1
            if since_improve >= 50:
                stalled = True
                break
        slope = float(grad @ direction)
        alpha = min(1.0, 2.0 * step)
        # objective differences below this are double-precision noise; there
        # the step is judged by gradient-norm contraction instead of Armijo
        noise_floor = 64.0 * np.finfo(float).eps * (1.0 + abs(J))
        accepted = False
        for _ in range(60):
            z_new = z + alpha * direction
            J_new = log_posterior(model, z_new)
            if c_armijo * alpha * slope > noise_floor:
                if J_new >= J + c_armijo * alpha * slope:
                    accepted = True
                    break
            else:
                g_new = _grad_J(model, z_new)
                if float(np.max(np.abs(g_new))) <= g_norm:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            stalled = True
            break
        z = z_new
        J = J_new
        step = alpha
    else:
        stalled = True

    if stalled:
        z, g_norm = _polish_mode(model, z, tol, budget=max(4 * (max_iter - iterations), 400))
        stat_gap = float(np.max(np.abs(model.mul_K(_grad_J(model, z)))))
        if g_norm > tol or stat_gap > tol:
            raise ConvergenceError(
                f"mode not found in {max_iter} iterations; |grad J|_inf = {g_norm:.3e}"
            )

    grad, hess = posterior_derivatives(model, z)
    f, d1, _, _ = model.warp_jets(z)
    pi = model.pi_from_f(f)
    return LaplaceState(
        z_hat=z,
        f_hat=f,
        pi_hat=pi,
        Pi=_stacked_Pi(pi, model.n, model.C),
        W=_dense_W(pi, model.n, model.C),
        hessian=hess,
        converged=True,
        iterations=iterations,
        grad_inf_norm=float(np.max(np.abs(grad))),
        stationarity_gap=float(np.max(np.abs(z - model.mul_K(d1 * (model.y_flat - pi))))),
    )


def _polish_mode(model: HpcModel, z: np.ndarray, tol: float, budget: int):
    """Hessian-free L-BFGS refinement of a stalled ascent."""
    from scipy.optimize import minimize

    def negJ(v):
        val = log_posterior(model, v)
        if not np.isfinite(val):
            return 1e300, np.zeros_like(v)
        return -val, -_grad_J(model, v)

    res = minimize(negJ, z, jac=True, method="L-BFGS-B",
                   options={"maxfun": budget, "maxiter": budget, "gtol": 0.25 * tol,
                            "ftol": 1e-18, "maxcor": 25, "maxls": 40})
    z_new = res.x
    # keep whichever point has the smaller gradient
    g_old = float(np.max(np.abs(_grad_J(model, z))))
    g_new = float(np.max(np.abs(_grad_J(model, z_new))))
    return (z_new, g_new) if g_new <= g_old else (z, g_old)


def log_marginal_likelihood(model: HpcModel, state: LaplaceState, strict: bool = True) -> float:
    """Laplace evidence log q(y|X) = J(z_hat) - log|-hess J(z_hat)| / 2.

    In the Gaussian-marginal degeneracy this is exactly the classical GPC
    Laplace evidence (the |I + W^{1/2} K W^{1/2}| form); the prior and
    Gaussian-integral normalizers cancel, so no 2*pi constant appears.
    """
    neg = state.neg_hessian()
    if strict and not neg.pd:
        raise IndefiniteHessianError(
            f"saddle/indefinite mode: -hess J has min eigenvalue {neg.min_eig:.3e}; "
            f"diagnostics: {neg.eig_diagnostics()}"
        )
    value = log_posterior(model, state.z_hat) - 0.5 * neg.logdet
    state.log_marginal = value
    return value


@dataclass(frozen=True)
class PredictiveResult:
    """Class probabilities with their Monte-Carlo standard errors."""

    probs: np.ndarray
    mc_se: np.ndarray
    method: str

    def __iter__(self):
        return iter(self.probs)


def _predictive_gaussian(model: HpcModel, state: LaplaceState, k_star_blocks, k_ss):
    """Mean and covariance of q(z_*|X, y, x_*) for one test point."""
    n, C = model.n, model.C
    A = np.zeros((C, model.size))
    mean = np.zeros(C)
    prior_var = np.zeros(C)
    for c, fac in enumerate(model._factors()):
        a = cho_solve(fac, np.asarray(k_star_blocks[c], dtype=float))
        A[c, c * n:(c + 1) * n] = a
        mean[c] = a @ state.z_hat[c * n:(c + 1) * n]
        prior_var[c] = k_ss[c] - float(np.asarray(k_star_blocks[c]) @ a)
    S = np.diag(np.maximum(prior_var, 0.0)) + A @ state.neg_hessian().solve(A.T)
    return mean, 0.5 * (S + S.T)


def _push_probs(model: HpcModel, z_star: np.ndarray) -> np.ndarray:
    """Warp z_* draws (m, C) through the per-block transforms and softmax."""
    f_star = np.empty_like(z_star)
    for c, t in enumerate(model.block_transforms()):
        f_star[:, c] = t.warp(z_star[:, c])
    return softmax_likelihood(f_star)


def laplace_predict_from_cov(model: HpcModel, state: LaplaceState, k_star_blocks, k_ss,
                             samples: int = 10_000, seed: int = 0,
                             method: str = "sampling") -> PredictiveResult:
    """Predictive class probabilities from explicit cross-covariances.

    k_star_blocks is one length-n vector per class; k_ss one prior variance
    per class. method 'sampling' draws from the z-space predictive Gaussian
    and averages softmax(warp(z_*)); 'quadrature' uses a tensor-product
    Gauss-Hermite rule and requires the cross-class covariance to be
    diagonal (it is whenever the test point is uncorrelated with training,
    or the Laplace covariance is not coupled across classes).
    """
    mean, S = _predictive_gaussian(model, state, k_star_blocks, k_ss)
    C = model.C
    if method == "quadrature":
        off = S - np.diag(np.diag(S))
        scale = math.sqrt(float(np.max(np.diag(S))) + 1e-300)
        if np.max(np.abs(off)) > 1e-10 * scale * scale:
            raise ValueError("quadrature predictive requires a diagonal cross-class covariance")
        from numpy.polynomial.hermite_e import hermegauss

        nodes, weights = hermegauss(24)
        grids = np.meshgrid(*[mean[c] + math.sqrt(max(S[c, c], 0.0)) * nodes for c in range(C)], indexing="ij")
        z_star = np.stack([g.ravel() for g in grids], axis=1)
        wgrid = np.meshgrid(*[weights] * C, indexing="ij")
        wprod = np.ones(z_star.shape[0])
        for w in wgrid:
            wprod = wprod * w.ravel()
        wprod = wprod / (2.0 * math.pi) ** (C / 2.0)
        probs = wprod @ _push_probs(model, z_star)
        return PredictiveResult(probs=probs, mc_se=np.zeros(C), method="quadrature")
    if method != "sampling":
        raise ValueError(f"unknown predictive method {method!r}")
    rng = np.random.default_rng(seed)
    vals, vecs = np.linalg.eigh(S)
    L = vecs * np.sqrt(np.maximum(vals, 0.0))
    z_star = mean + rng.standard_normal((samples, C)) @ L.T
    p = _push_probs(model, z_star)
    probs = p.mean(axis=0)
    se = p.std(axis=0, ddof=1) / math.sqrt(samples)
    return PredictiveResult(probs=probs, mc_se=se, method="sampling")


def laplace_predict(model: HpcModel, state: LaplaceState, x_star, samples: int = 10_000,
                    seed: int = 0, method: str = "sampling") -> PredictiveResult:
    """Predictive class probabilities at a test location x_*."""
    if model.kernels is None or model.X is None:
        raise ValueError("kernel-based prediction needs a model built from kernels and X")
    k_star_blocks = []
    k_ss = []
    for k in model.kernels:
        k_star_blocks.append(kernel_cross(k, np.atleast_2d(x_star), model.X)[0])
        k_ss.append(kernel_eval(k, x_star, x_star) + max(k.noise, NOISE_FLOOR))
    return laplace_predict_from_cov(model, state, k_star_blocks, k_ss,
                                    samples=samples, seed=seed, method=method)


# ---------------------------------------------------------------------------
# evidence gradients


def _to_points(v: np.ndarray, n: int, C: int) -> np.ndarray:
    """Flat class-major vector -> (n, C) matrix."""
    return v.reshape(C, n).T


def _diag_embed(v: np.ndarray) -> np.ndarray:
    """(n, C) -> (n, C, C) with v on each point's diagonal."""
    n, C = v.shape
    out = np.zeros((n, C, C))
    out[:, np.arange(C), np.arange(C)] = v
    return out


class _GradContext:
    """Per-point quantities reused across parameter directions.

    The likelihood couples latent values only within a point, so every
    likelihood-side perturbation of hess J lives on per-point C x C blocks;
    working in that layout avoids dense nC x nC temporaries.
    """

    def __init__(self, model: HpcModel, state: LaplaceState):
        n, C = model.n, model.C
        self.model = model
        self.n, self.C = n, C
        self.f, d1, d2, d3 = model.warp_jets(state.z_hat)
        self.d1_flat, self.d2_flat, self.d3_flat = d1, d2, d3
        self.pi_flat = state.pi_hat
        self.d1 = _to_points(d1, n, C)
        self.d2 = _to_points(d2, n, C)
        self.pi = _to_points(self.pi_flat, n, C)
        self.r = _to_points(model.y_flat - self.pi_flat, n, C)
        # W restricted to its per-point blocks
        self.Wpt = _diag_embed(self.pi) - self.pi[:, :, None] * self.pi[:, None, :]
        H = state.hessian
        self.Hinv = np.linalg.inv(H)
        # per-point cross-class blocks of Hinv, for fast trace contractions
        self.Hinv_pt = np.einsum("cidi->icd", self.Hinv.reshape(C, n, C, n))
        self.alpha = model.solve_K(state.z_hat)

    def W_apply(self, v_flat: np.ndarray) -> np.ndarray:
        vp = _to_points(v_flat, self.n, self.C)
        out = np.einsum("icd,id->ic", self.Wpt, vp)
        return out.T.ravel()

    def dA_points(self, delta_f, delta_d1, delta_d2) -> np.ndarray:
        """Per-point blocks of the likelihood-part change of hess J under
        perturbations of (f, df/dz, d2f/dz2)."""
        df = _to_points(delta_f, self.n, self.C)
        dd1 = _to_points(delta_d1, self.n, self.C)
        dd2 = _to_points(delta_d2, self.n, self.C)
        dpi = np.einsum("icd,id->ic", self.Wpt, df)
        dWpt = _diag_embed(dpi) - dpi[:, :, None] * self.pi[:, None, :] - self.pi[:, :, None] * dpi[:, None, :]
        dA = _diag_embed(dd2 * self.r - self.d2 * dpi)
        dA -= dd1[:, :, None] * self.Wpt * self.d1[:, None, :]
        dA -= self.d1[:, :, None] * self.Wpt * dd1[:, None, :]
        dA -= self.d1[:, :, None] * dWpt * self.d1[:, None, :]
        return dA

    def trace_dA(self, dA_pt: np.ndarray) -> float:
        return float(np.sum(self.Hinv_pt * dA_pt))


@dataclass(frozen=True)
class EvidenceGradients:
    """d log q / d(parameter): kernel entries are (C, 3) for per-block
    (sigma2, lam, noise); b is per-block and summed when the scale is
    shared."""

    kernel: np.ndarray
    b_blocks: np.ndarray

    @property
    def b(self) -> float:
        return float(self.b_blocks.sum())

    def kernel_tied(self) -> np.ndarray:
        return self.kernel.sum(axis=0)


def evidence_gradients(model: HpcModel, state: LaplaceState) -> EvidenceGradients:
    """Gradients of the Laplace evidence with respect to kernel parameters
    and the marginal scale, with the mode shift handled implicitly.

    For any parameter p, d z_hat/dp solves hess J(z_hat) v = -d(grad J)/dp,
    and the evidence derivative combines the explicit terms with
    -tr(hess J^{-1} d hess J/dp) / 2.
    """
    if model.kernels is None:
        raise ValueError("evidence gradients need a kernel-backed model (not fixed blocks)")
    n, C, m = model.n, model.C, model.size
    ctx = _GradContext(model, state)
    f, d1, d2, d3 = ctx.f, ctx.d1_flat, ctx.d2_flat, ctx.d3_flat
    resid = model.y_flat - ctx.pi_flat
    alpha = ctx.alpha

    def mode_shift(dgrad_dp):
        return -ctx.Hinv @ dgrad_dp

    kernel_grads = np.zeros((C, len(KERNEL_PARAMS)))
    kinv_cache: dict[int, np.ndarray] = {}
    grads_cache: dict[KernelSpec, dict] = {}
    for c in range(C):
        fac = model._factors()[c]
        if id(fac) not in kinv_cache:
            kinv_cache[id(fac)] = cho_solve(fac, np.eye(n))
        Kinv_c = kinv_cache[id(fac)]
        if model.kernels[c] not in grads_cache:
            grads_cache[model.kernels[c]] = kernel_gradients(model.kernels[c], model.X)
        grads_c = grads_cache[model.kernels[c]]
        sl = slice(c * n, (c + 1) * n)
        Hinv_cc = ctx.Hinv[sl, sl]
        for j, name in enumerate(KERNEL_PARAMS):
            dKc = grads_c[name]
            u = np.zeros(m)
            u[sl] = Kinv_c @ (dKc @ alpha[sl])
            v = mode_shift(u)
            explicit = 0.5 * float(alpha[sl] @ dKc @ alpha[sl]) - 0.5 * float(np.sum(Kinv_c * dKc))
            mode_terms = float((resid * d1) @ v) - float(v @ alpha)
            trace = ctx.trace_dA(ctx.dA_points(d1 * v, d2 * v, d3 * v))
            trace += float(np.sum(Hinv_cc * (Kinv_c @ dKc @ Kinv_c)))
            kernel_grads[c, j] = explicit + mode_terms - 0.5 * trace

    b_grads = np.zeros(C)
    transforms = model.block_transforms()
    for c in range(C):
        b_c = transforms[c].marginal.b
        mask = np.zeros(m)
        mask[c * n:(c + 1) * n] = 1.0
        df_db = mask * f / b_c
        dd1_db = mask * d1 / b_c
        dd2_db = mask * d2 / b_c
        dgrad = dd1_db * resid - d1 * ctx.W_apply(df_db)
        v = mode_shift(dgrad)
        df_total = df_db + d1 * v
        dA = ctx.dA_points(df_db, dd1_db, dd2_db)
        dA += ctx.dA_points(d1 * v, d2 * v, d3 * v)
        b_grads[c] = float(resid @ df_total) - float(v @ alpha) - 0.5 * ctx.trace_dA(dA)

    return EvidenceGradients(kernel=kernel_grads, b_blocks=b_grads)


# ---------------------------------------------------------------------------
# hyperparameter fitting


@dataclass
class FitConfig:
    """Settings for regularized evidence ascent."""

    learn_b: bool = True
    max_steps: int = 40
    grad_tol: float = 1e-3
    log_bound: float = 4.0
    mode_tol: float = 1e-8
    mode_max_iter: int = 1500
    regularizer: float | None = None
    seed: int = 0


@dataclass
class FitResult:
    model: HpcModel
    state: LaplaceState
    trace: list
    converged: bool


def _rebuild(model: HpcModel, params: dict) -> HpcModel:
    kernels = tuple(
        k.replace(sigma2=params["sigma2"], lam=params["lam"], noise=params["noise"]) for k in model.kernels
    )
    return replace(model, kernels=kernels, transform=model.transform.with_b(params["b"]),
                   per_block_b=None, _cache={})


def fit(model: HpcModel, config: FitConfig | None = None) -> FitResult:
    """Learn kernel parameters (tied across class blocks) and the marginal
    scale b by ascending the l2-regularized Laplace evidence.

    Parameters are log-reparameterized so positivity is automatic; the
    penalty is regularizer * sum((log p - log center)^2) with centers from
    PRIOR_CENTERS. The ascent uses L-BFGS-B on the log parameters with the
    analytic evidence gradients, warm-starting each mode search from the
    previous one; the recorded trace holds the accepted iterates, monotone
    up to line-search tolerance. With a Gaussian marginal b is never
    learned (only b/sigma is identifiable there).
    """
    from scipy.optimize import minimize

    config = config or FitConfig()
    if model.kernels is None:
        raise ValueError("fit requires a kernel-backed model")
    weight = model.regularizer if config.regularizer is None else config.regularizer
    learn_b = config.learn_b and model.transform.marginal.family != "gaussian"
    names = list(KERNEL_PARAMS) + (["b"] if learn_b else [])

    k0 = model.kernels[0]
    init = {"sigma2": k0.sigma2, "lam": k0.lam, "noise": k0.noise, "b": model.transform.marginal.b}
    u0 = np.array([math.log(init[name]) for name in names])
    u_center = np.array([math.log(PRIOR_CENTERS[name]) for name in names])

    best = {"obj": -np.inf, "model": None, "state": None, "params": None}
    warm = {"z": np.zeros(model.size)}
    last = {}
    trace = []

    def build(u_vec):
        p = dict(init)
        for name, val in zip(names, u_vec):
            p[name] = math.exp(val)
        return _rebuild(model, p), p

    def negobj(u_vec):
        cand, p = build(u_vec)
        try:
            try:
                state = find_mode(cand, z0=warm["z"], tol=config.mode_tol, max_iter=config.mode_max_iter)
            except ConvergenceError:
                # a warm start can sit on a bad ridge of the new posterior
                state = find_mode(cand, z0=None, tol=config.mode_tol, max_iter=config.mode_max_iter)
            logq = log_marginal_likelihood(cand, state, strict=False)
        except (ConvergenceError, np.linalg.LinAlgError):
            # treat as a very bad point; push the line search back
            last.update(obj=-1e12, u=np.array(u_vec), params=p)
            return 1e12, np.zeros(len(names))
        warm["z"] = state.z_hat
        penalty = weight * float(np.sum((u_vec - u_center) ** 2))
        obj = logq - penalty
        eg = evidence_gradients(cand, state)
        tied = eg.kernel_tied()
        grad_u = np.zeros(len(names))
        for j, name in enumerate(names):
            raw = eg.b if name == "b" else tied[j]
            # chain rule through p = exp(u), then the penalty
            grad_u[j] = raw * p[name] - 2.0 * weight * (u_vec[j] - u_center[j])
        if obj > best["obj"]:
            best.update(obj=obj, model=cand, state=state, params=p)
        last.update(obj=obj, u=np.array(u_vec), params=p, grad_inf_norm=float(np.max(np.abs(grad_u))))
        return -obj, -grad_u

    def record(u_vec):
        trace.append({
            "step": len(trace) + 1,
            "objective": last.get("obj"),
            "params": dict(last.get("params", {})),
            "grad_inf_norm": last.get("grad_inf_norm"),
        })

    f0, g0 = negobj(u0)
    trace.append({"step": 0, "objective": -f0, "params": dict(best["params"] or {}),
                  "grad_inf_norm": float(np.max(np.abs(g0)))})
    bounds = [(-config.log_bound, config.log_bound)] * len(names)
    res = minimize(negobj, u0, jac=True, method="L-BFGS-B", bounds=bounds, callback=record,
                   options={"maxiter": config.max_steps, "maxfun": 4 * config.max_steps + 8,
                            "gtol": config.grad_tol, "ftol": 1e-10})
    if best["model"] is None:
        raise ConvergenceError("hyperparameter search never produced a usable model")
    return FitResult(model=best["model"], state=best["state"], trace=trace,
                     converged=bool(res.success) or float(np.max(np.abs(res.jac))) <= 10 * config.grad_tol)


# ---------------------------------------------------------------------------
# serialization

SCHEMA_VERSION = 1


def model_to_dict(model: HpcModel, state: LaplaceState | None = None) -> dict:
    if model.kernels is None:
        raise ValueError("only kernel-backed models are serialized")
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kernels": [
            {"family": k.family, "sigma2": k.sigma2, "lambda": k.lam, "noise": k.noise} for k in model.kernels
        ],
        "marginal": {"family": model.transform.marginal.family, "b": model.transform.marginal.b},
        "sigma2": model.transform.sigma2,
        "per_block_b": list(model.per_block_b) if model.per_block_b else None,
        "regularizer": model.regularizer,
        "X": np.asarray(model.X).tolist(),
        "y": np.asarray(model.y).astype(int).tolist(),
    }
    if state is not None:
        doc["z_hat"] = state.z_hat.tolist()
    return doc


def model_from_dict(doc: dict) -> tuple[HpcModel, np.ndarray | None]:
    from .marginals import MarginalSpec

    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema version {doc.get('schema_version')!r}")
    kernels = tuple(
        KernelSpec(family=k["family"], sigma2=k["sigma2"], lam=k["lambda"], noise=k["noise"])
        for k in doc["kernels"]
    )
    transform = CopulaTransform(MarginalSpec(doc["marginal"]["family"], doc["marginal"]["b"]), doc["sigma2"])
    model = HpcModel(
        y=np.asarray(doc["y"], dtype=float),
        transform=transform,
        X=np.asarray(doc["X"], dtype=float),
        kernels=kernels,
        per_block_b=tuple(doc["per_block_b"]) if doc.get("per_block_b") else None,
        regularizer=doc.get("regularizer", 0.0),
    )
    z_hat = np.asarray(doc["z_hat"], dtype=float) if "z_hat" in doc else None
    return model, z_hat
