"""Experiment orchestration: cross-validation, nested regularizer selection,
and the synthetic covariate-shift study with its region-growth curve.

Model kinds are 'gpc' (Gaussian marginal, the classic classifier recovered
as a degenerate case) and 'hpc' (heavy-tailed marginal with the scale b
learned alongside the kernel). Everything is seed-deterministic: fold
splits, fits, and prediction sampling derive their seeds from the
experiment seed, so repeated runs produce byte-identical metrics.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import binomtest, spearmanr

from .data import (Dataset, RegionRect, SynthSpec, REGION_SPARSE, REGION_DENSE,
                   assign_regions, synth_covariate_shift)
from .hpc import (FitConfig, HpcModel, find_mode, fit, laplace_predict)
from .kernels import KernelSpec
from .marginals import CopulaTransform, MarginalSpec

__all__ = [
    "ExperimentConfig",
    "crossval",
    "nested_regularizer_selection",
    "region_growth_curve",
    "covariate_shift_study",
    "DEFAULT_REG_GRID",
]

DEFAULT_REG_GRID = tuple(float(x) for x in np.logspace(-3, 1, 5))


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings shared by the crossval and study commands."""

    folds: int = 10
    train_cap: int = 100
    seed: int = 0
    kernel_family: str = "von_mises"
    kernel_sigma2: float = 1.0
    kernel_lambda: float = 1.0
    kernel_noise: float = 0.1
    marginal_family: str = "laplace"
    marginal_b: float = 1.0
    copula_sigma2: float = 1.0
    regularizer: float = 1.0
    learn: bool = True
    fit_max_steps: int = 12
    fit_grad_tol: float = 5e-3
    mode_tol: float = 1e-7
    predict_samples: int = 4000

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.train_cap < 1:
            raise ValueError("train_cap must be >= 1")

    def kernel(self) -> KernelSpec:
        return KernelSpec(self.kernel_family, self.kernel_sigma2, self.kernel_lambda, self.kernel_noise)

    def transform(self, kind: str) -> CopulaTransform:
        if kind == "gpc":
            # identity warp: the Gaussian process classifier special case
            return CopulaTransform(MarginalSpec("gaussian", math.sqrt(self.copula_sigma2)), self.copula_sigma2)
        return CopulaTransform(MarginalSpec(self.marginal_family, self.marginal_b), self.copula_sigma2)

    def hash(self, kind: str) -> str:
        doc = dict(asdict(self), kind=kind)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _fit_fold(train: Dataset, C: int, kind: str, cfg: ExperimentConfig):
    model = HpcModel(
        y=train.one_hot(C),
        transform=cfg.transform(kind),
        X=train.points,
        kernels=(cfg.kernel(),),
        regularizer=cfg.regularizer,
    )
    if cfg.learn:
        result = fit(model, FitConfig(max_steps=cfg.fit_max_steps, grad_tol=cfg.fit_grad_tol,
                                      mode_tol=cfg.mode_tol))
        return result.model, result.state
    state = find_mode(model, tol=cfg.mode_tol)
    return model, state


def crossval(ds: Dataset, cfg: ExperimentConfig, kind: str = "hpc") -> dict:
    """K-fold cross-validation accuracy overall and by region.

    Returns a metrics document with per-fold entries, per-point predicted
    labels (-1 where a fold was skipped for missing a class), and a
    config hash. Deterministic for a fixed config.
    """
    if kind not in ("gpc", "hpc"):
        raise ValueError(f"model kind must be gpc or hpc, got {kind!r}")
    n = len(ds)
    C = ds.n_classes
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    folds = np.array_split(perm, cfg.folds)
    predicted = np.full(n, -1, dtype=int)
    per_fold = []
    warnings_log = []

    for fold_id, test_idx in enumerate(folds):
        if len(test_idx) == 0:
            continue
        train_idx = np.concatenate([f for j, f in enumerate(folds) if j != fold_id])
        if len(train_idx) > cfg.train_cap:
            train_idx = train_idx[: cfg.train_cap]
        train = ds.subset(train_idx)
        if C == 1:
            predicted[test_idx] = 0
            per_fold.append({"fold": fold_id, "n_test": int(len(test_idx)), "accuracy": 1.0})
            continue
        if len(np.unique(train.labels)) < C:
            warnings_log.append(f"fold {fold_id} skipped: training split is missing a class")
            continue
        model, state = _fit_fold(train, C, kind, cfg)
        for t in test_idx:
            p = laplace_predict(model, state, ds.points[t], samples=cfg.predict_samples,
                                seed=cfg.seed * 1_000_003 + fold_id * 1009 + int(t))
            predicted[t] = int(np.argmax(p.probs))
        correct = predicted[test_idx] == ds.labels[test_idx]
        per_fold.append({"fold": fold_id, "n_test": int(len(test_idx)), "accuracy": float(np.mean(correct))})

    scored = predicted >= 0
    correct = (predicted == ds.labels) & scored

    def rate(mask):
        m = mask & scored
        return float(correct[m].sum() / m.sum()) if m.sum() else None

    sparse_mask = ds.region == REGION_SPARSE
    dense_mask = ds.region != REGION_SPARSE
    metrics = {
        "kind": kind,
        "overall_acc": rate(np.ones(n, dtype=bool)),
        "sparse_acc": rate(sparse_mask),
        "dense_acc": rate(dense_mask),
        "n_scored": int(scored.sum()),
        "n_sparse": int((sparse_mask & scored).sum()),
        "n_dense": int((dense_mask & scored).sum()),
        "per_fold": per_fold,
        "warnings": warnings_log,
        "predicted": predicted.tolist(),
        "config_hash": cfg.hash(kind),
    }
    return metrics


def nested_regularizer_selection(datasets: dict, cfg: ExperimentConfig, kind: str = "hpc",
                                 grid=DEFAULT_REG_GRID) -> dict:
    """Pick each dataset's regularizer from the others' cross-validated
    accuracy, then report its own cross-validation at the chosen value.

    datasets maps name -> Dataset. For a target dataset the chosen
    regularizer maximizes mean overall accuracy over the folds of all the
    remaining datasets (ties break toward stronger regularization).
    """
    from dataclasses import replace as dc_replace

    names = list(datasets)
    if len(names) < 2:
        raise ValueError("nested selection needs at least two datasets")
    table = {}
    for name in names:
        for reg in grid:
            local = dc_replace(cfg, regularizer=float(reg))
            table[(name, reg)] = crossval(datasets[name], local, kind)["overall_acc"]
    out = {}
    for target in names:
        others = [n for n in names if n != target]
        best_reg, best_score = None, -np.inf
        for reg in sorted(grid, reverse=True):
            score = float(np.mean([table[(n, reg)] for n in others]))
            if score > best_score:
                best_reg, best_score = reg, score
        chosen = dc_replace(cfg, regularizer=float(best_reg))
        out[target] = {
            "chosen_regularizer": float(best_reg),
            "selection_score": best_score,
            "metrics": crossval(datasets[target], chosen, kind),
        }
    return out


def region_growth_curve(ds: Dataset, rects: list[RegionRect], predicted: np.ndarray,
                        levels: int) -> list[dict]:
    """Sparse-region accuracy as the region grows to swallow dense points.

    predicted holds per-point predicted labels (-1 = not scored). Each row
    reports the sparse point count and sparse accuracy at one growth level.
    """
    predicted = np.asarray(predicted, dtype=int)
    scored = predicted >= 0
    rows = []
    for level in range(levels):
        tagged = assign_regions(ds, rects, level=level)
        mask = (tagged.region == REGION_SPARSE) & scored
        count = int(mask.sum())
        acc = float(np.mean(predicted[mask] == ds.labels[mask])) if count else None
        rows.append({"level": level, "n_sparse": count, "sparse_acc": acc})
    return rows


def covariate_shift_study(seeds, spec: SynthSpec | None = None,
                          cfg: ExperimentConfig | None = None,
                          hpc_kind_cfg: ExperimentConfig | None = None) -> dict:
    """Run GPC and HPC over seeded synthetic datasets and aggregate.

    Per seed: one dataset, one cross-validation per model (per-point
    predictions are reused across growth levels), sparse/dense accuracy
    and the growth curve. Aggregates report means, the sign-test p-value
    for HPC beating GPC on sparse accuracy, and the Spearman correlation
    of the mean HPC-GPC sparse gap against growth level.
    """
    spec = spec or SynthSpec()
    base = cfg or ExperimentConfig()
    hpc_cfg = hpc_kind_cfg or base
    levels = spec.growth_levels
    per_seed = []
    for seed in seeds:
        ds, rects = synth_covariate_shift(seed, spec)
        from dataclasses import replace as dc_replace

        cfg_seeded = dc_replace(base, seed=int(seed))
        hpc_seeded = dc_replace(hpc_cfg, seed=int(seed))
        gpc = crossval(ds, cfg_seeded, "gpc")
        hpc = crossval(ds, hpc_seeded, "hpc")
        curve_g = region_growth_curve(ds, rects, np.asarray(gpc["predicted"]), levels)
        curve_h = region_growth_curve(ds, rects, np.asarray(hpc["predicted"]), levels)
        per_seed.append({
            "seed": int(seed),
            "gpc": {k: gpc[k] for k in ("overall_acc", "sparse_acc", "dense_acc", "config_hash")},
            "hpc": {k: hpc[k] for k in ("overall_acc", "sparse_acc", "dense_acc", "config_hash")},
            "curve": [
                {"level": g["level"], "n_sparse": g["n_sparse"],
                 "gpc_sparse_acc": g["sparse_acc"], "hpc_sparse_acc": h["sparse_acc"]}
                for g, h in zip(curve_g, curve_h)
            ],
        })

    gpc_sparse = np.array([r["gpc"]["sparse_acc"] for r in per_seed])
    hpc_sparse = np.array([r["hpc"]["sparse_acc"] for r in per_seed])
    gpc_dense = np.array([r["gpc"]["dense_acc"] for r in per_seed])
    hpc_dense = np.array([r["hpc"]["dense_acc"] for r in per_seed])
    wins = int(np.sum(hpc_sparse > gpc_sparse))
    losses = int(np.sum(hpc_sparse < gpc_sparse))
    n_eff = wins + losses
    sign_p = float(binomtest(wins, n_eff, 0.5, alternative="greater").pvalue) if n_eff else 1.0

    mean_curve = []
    for level in range(levels):
        g = np.array([r["curve"][level]["gpc_sparse_acc"] for r in per_seed], dtype=float)
        h = np.array([r["curve"][level]["hpc_sparse_acc"] for r in per_seed], dtype=float)
        sizes = np.array([r["curve"][level]["n_sparse"] for r in per_seed], dtype=float)
        mean_curve.append({
            "level": level,
            "mean_n_sparse": float(sizes.mean()),
            "gpc_sparse_acc": float(g.mean()),
            "hpc_sparse_acc": float(h.mean()),
            "gap": float(h.mean() - g.mean()),
        })
    rho = float(spearmanr([row["level"] for row in mean_curve],
                          [row["gap"] for row in mean_curve]).statistic)
    return {
        "per_seed": per_seed,
        "mean_gpc_sparse_acc": float(gpc_sparse.mean()),
        "mean_hpc_sparse_acc": float(hpc_sparse.mean()),
        "mean_gpc_dense_acc": float(gpc_dense.mean()),
        "mean_hpc_dense_acc": float(hpc_dense.mean()),
        "sparse_wins": wins,
        "sparse_losses": losses,
        "sign_test_p": sign_p,
        "curve": mean_curve,
        "gap_spearman_rho": rho,
    }
