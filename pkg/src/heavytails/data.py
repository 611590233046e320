"""Datasets of angular covariates with class labels and region tags.

CSV layout: header ``phi,psi,label[,region]`` with angles in radians (or
``phi_deg,psi_deg`` for degrees), one point per row. Angles are normalized
into [0, 2*pi). Region tags stratify evaluation into sparse and dense
areas; tags can be loaded from the file, or assigned from axis-aligned
angular rectangles with wraparound and growth levels. A synthetic
covariate-shift generator places dense class clusters plus a band of
isolated, mislabel-prone points for the stand-in experiments.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Dataset",
    "RegionRect",
    "SynthSpec",
    "DataError",
    "TWO_PI",
    "normalize_angles",
    "torus_distance",
    "load_dataset",
    "save_dataset",
    "parse_region_spec",
    "region_spec_to_json",
    "assign_regions",
    "synth_covariate_shift",
]

TWO_PI = 2.0 * math.pi

REGION_DENSE = 0
REGION_SPARSE = 1
REGION_UNASSIGNED = -1
REGION_NAMES = {REGION_DENSE: "dense", REGION_SPARSE: "sparse", REGION_UNASSIGNED: "unassigned"}
REGION_CODES = {v: k for k, v in REGION_NAMES.items()}


class DataError(ValueError):
    """Malformed dataset input."""


def normalize_angles(a):
    return np.mod(np.asarray(a, dtype=float), TWO_PI)


def torus_distance(a, b):
    """Euclidean distance on the torus (per-coordinate minimal angle)."""
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    d = np.minimum(d, TWO_PI - d)
    return np.sqrt((d * d).sum(axis=-1))


@dataclass
class Dataset:
    points: np.ndarray            # (n, d) angles in [0, 2*pi)
    labels: np.ndarray            # (n,) ints in 0..C-1
    region: np.ndarray | None = None  # (n,) codes; None means unassigned

    def __post_init__(self):
        self.points = normalize_angles(np.atleast_2d(np.asarray(self.points, dtype=float)))
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.labels) != len(self.points):
            raise DataError("labels and points disagree in length")
        if np.any(self.labels < 0):
            raise DataError("labels must be nonnegative integers")
        if self.region is None:
            self.region = np.full(len(self.labels), REGION_UNASSIGNED, dtype=int)
        else:
            self.region = np.asarray(self.region, dtype=int)
            if len(self.region) != len(self.labels):
                raise DataError("region tags and points disagree in length")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def one_hot(self, n_classes: int | None = None) -> np.ndarray:
        C = n_classes or self.n_classes
        return np.eye(C)[self.labels]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.points[idx], self.labels[idx], self.region[idx])


def load_dataset(source) -> Dataset:
    """Read a dataset from a CSV path or file object.

    The header selects radians (``phi,psi``) or degrees (``phi_deg,psi_deg``);
    an optional trailing ``region`` column carries sparse/dense tags. Parse
    errors report the offending 1-based line number.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines()]
    if not lines:
        raise DataError("no data rows: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    if header[:3] == ["phi", "psi", "label"]:
        degrees = False
    elif header[:3] == ["phi_deg", "psi_deg", "label"]:
        degrees = True
    else:
        raise DataError(f"line 1: expected header phi,psi,label[,region], got {lines[0]!r}")
    has_region = len(header) == 4 and header[3] == "region"
    if len(header) > 3 and not has_region:
        raise DataError(f"line 1: unexpected extra columns {header[3:]}")

    points, labels, regions = [], [], []
    for ln_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != len(header):
            raise DataError(f"line {ln_no}: expected {len(header)} fields, got {len(parts)}")
        try:
            phi, psi = float(parts[0]), float(parts[1])
        except ValueError:
            raise DataError(f"line {ln_no}: angles must be numeric, got {parts[:2]}")
        try:
            label = int(parts[2])
        except ValueError:
            raise DataError(f"line {ln_no}: label must be an integer, got {parts[2]!r}")
        if label < 0:
            raise DataError(f"line {ln_no}: label out of range: {label}")
        if has_region:
            tag = parts[3]
            if tag not in REGION_CODES:
                raise DataError(f"line {ln_no}: unknown region tag {tag!r}")
            regions.append(REGION_CODES[tag])
        if degrees:
            phi, psi = math.radians(phi), math.radians(psi)
        points.append((phi, psi))
        labels.append(label)
    if not points:
        raise DataError("no data rows")
    return Dataset(np.asarray(points), np.asarray(labels), np.asarray(regions) if has_region else None)


def save_dataset(ds: Dataset, target) -> None:
    """Write a dataset as CSV (radians, LF line endings)."""
    out = io.StringIO()
    out.write("phi,psi,label,region\n")
    for p, lab, reg in zip(ds.points, ds.labels, ds.region):
        out.write(f"{p[0]!r},{p[1]!r},{int(lab)},{REGION_NAMES[int(reg)]}\n")
    text = out.getvalue()
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


@dataclass(frozen=True)
class RegionRect:
    """Axis-aligned angular rectangle with wraparound (lo > hi wraps)."""

    phi: tuple[float, float]
    psi: tuple[float, float]
    tag: str = "sparse"
    level: int = 0

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = normalize_angles(points)

        def in_interval(vals, lo, hi):
            lo, hi = float(lo) % TWO_PI, float(hi) % TWO_PI
            if hi >= lo:
                return (vals >= lo) & (vals <= hi)
            return (vals >= lo) | (vals <= hi)

        return in_interval(pts[:, 0], *self.phi) & in_interval(pts[:, 1], *self.psi)


def parse_region_spec(doc) -> list[RegionRect]:
    if isinstance(doc, str):
        doc = json.loads(doc)
    rects = []
    for r in doc["rectangles"]:
        tag = r.get("tag", "sparse")
        if tag not in ("sparse", "dense"):
            raise DataError(f"region tag must be sparse or dense, got {tag!r}")
        rects.append(RegionRect(phi=tuple(r["phi"]), psi=tuple(r["psi"]), tag=tag,
                                level=int(r.get("level", 0))))
    return rects


def region_spec_to_json(rects: list[RegionRect]) -> dict:
    return {
        "rectangles": [
            {"phi": list(r.phi), "psi": list(r.psi), "tag": r.tag, "level": r.level} for r in rects
        ]
    }


def assign_regions(ds: Dataset, rects: list[RegionRect], level: int = 0) -> Dataset:
    """Tag every point from the rectangles active at the given growth level.

    A rectangle participates when its level is <= the requested level.
    Points inside both a sparse and a dense rectangle are contradictory and
    rejected; points in no rectangle default to dense.
    """
    active = [r for r in rects if r.level <= level]
    sparse_mask = np.zeros(len(ds), dtype=bool)
    dense_mask = np.zeros(len(ds), dtype=bool)
    for r in active:
        inside = r.contains(ds.points)
        if r.tag == "sparse":
            sparse_mask |= inside
        else:
            dense_mask |= inside
    clash = sparse_mask & dense_mask
    if np.any(clash):
        raise DataError(f"contradictory region tags for {int(clash.sum())} points")
    region = np.where(sparse_mask, REGION_SPARSE, REGION_DENSE)
    return Dataset(ds.points, ds.labels, region)


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic covariate-shift layout on the torus.

    Dense wrapped-Gaussian clusters (one per class) sit in the left part of
    the square; isolated points live in a vertical band kept at least
    min_dist away from everything else, with a fixed count of them
    relabeled to a wrong class. Growth levels widen the sparse band.
    """

    class_centers: tuple = ((1.4, 1.7), (2.9, 1.5), (2.1, 3.4))
    cluster_spread: float = 0.35
    dense_per_class: int = 30
    n_isolated: int = 10
    label_noise: float = 0.4
    min_dist: float = 0.75
    band_phi: tuple[float, float] = (4.5, 6.2)
    growth_levels: int = 5
    growth_margin: float = 0.55

    def region_rects(self) -> list[RegionRect]:
        rects = [RegionRect(phi=self.band_phi, psi=(0.0, TWO_PI - 1e-9), tag="sparse", level=0)]
        for lvl in range(1, self.growth_levels):
            lo = self.band_phi[0] - lvl * self.growth_margin
            hi = self.band_phi[1] + lvl * self.growth_margin
            rects.append(RegionRect(phi=(lo % TWO_PI, hi % TWO_PI), psi=(0.0, TWO_PI - 1e-9),
                                    tag="sparse", level=lvl))
        return rects


def synth_covariate_shift(seed: int, spec: SynthSpec | None = None):
    """Generate a reproducible covariate-shift dataset.

    Returns (dataset, region_rects). Dense points are resampled out of the
    sparse band so the band contains exactly the isolated points; isolated
    points are rejection-sampled to keep nearest-neighbor distances at or
    above min_dist, and a deterministic count round(label_noise * n_isolated)
    of them gets a wrong label.
    """
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    band = RegionRect(phi=spec.band_phi, psi=(0.0, TWO_PI - 1e-9), tag="sparse", level=0)
    C = len(spec.class_centers)

    dense_pts, dense_labels = [], []
    for c, center in enumerate(spec.class_centers):
        need = spec.dense_per_class
        got = 0
        for _ in range(1000 * need):
            p = normalize_angles(np.asarray(center) + rng.normal(0.0, spec.cluster_spread, 2))
            if band.contains(p[None, :])[0]:
                continue
            dense_pts.append(p)
            dense_labels.append(c)
            got += 1
            if got == need:
                break
        if got < need:
            raise DataError("infeasible spec: cannot place dense points outside the sparse band")
    dense_pts = np.asarray(dense_pts)

    lo, hi = spec.band_phi
    width = (hi - lo) % TWO_PI
    isolated = []
    for _ in range(spec.n_isolated):
        placed = False
        for _ in range(1000):
            p = np.array([lo + rng.random() * width, rng.random() * TWO_PI]) % TWO_PI
            others = dense_pts if not isolated else np.vstack([dense_pts, np.asarray(isolated)])
            if float(np.min(torus_distance(others, p[None, :]))) >= spec.min_dist:
                isolated.append(p)
                placed = True
                break
        if not placed:
            raise DataError(
                f"infeasible spec: cannot place {spec.n_isolated} isolated points at min_dist {spec.min_dist}"
            )
    isolated = np.asarray(isolated)

    centers = np.asarray(spec.class_centers)
    iso_labels = np.array([
        int(np.argmin(torus_distance(centers, p[None, :]))) for p in isolated
    ])
    n_flip = int(round(spec.label_noise * spec.n_isolated))
    flip_idx = rng.choice(spec.n_isolated, size=n_flip, replace=False)
    for j in flip_idx:
        wrong = [c for c in range(C) if c != iso_labels[j]]
        iso_labels[j] = wrong[rng.integers(len(wrong))]

    points = np.vstack([dense_pts, isolated])
    labels = np.concatenate([np.asarray(dense_labels), iso_labels])
    region = np.concatenate([
        np.full(len(dense_pts), REGION_DENSE), np.full(len(isolated), REGION_SPARSE)
    ])
    order = rng.permutation(len(points))
    ds = Dataset(points[order], labels[order], region[order])
    return ds, spec.region_rects()
