"""Heavy-tailed stochastic processes built from Gaussian processes via a
Gaussian copula: regression (HPR), multiclass classification (HPC) with
Laplace-approximation inference, and tools for the selective-shrinkage
analysis that motivates them."""

from .marginals import CopulaTransform, MarginalSpec
from .kernels import KernelSpec, kernel_eval, kernel_gradients, kernel_matrix

__all__ = [
    "CopulaTransform",
    "MarginalSpec",
    "KernelSpec",
    "kernel_eval",
    "kernel_gradients",
    "kernel_matrix",
]
