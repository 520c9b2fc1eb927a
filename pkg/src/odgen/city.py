"""City representation: regions with attributes, spatial priors, and OD flows.

A city is an attributed graph: N regions with a feature matrix (demographic
columns first, then POI columns), a binary contiguity matrix, a symmetric
distance matrix in kilometers, and an N x N origin-destination flow matrix.
Flow matrices carry a space tag so raw commuter counts and their log-space
twin log(F+1) cannot be mixed up.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

# exp() overflows float64 near 709; anything this large in log space is a bug upstream
LOG_OVERFLOW_LIMIT = 700.0

# log-space entries may dip a hair below zero from float round-off (e.g. after
# a diffusion sampler clamp); anything worse than this is treated as invalid
LOG_NEGATIVE_SLACK = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class UrbanGraph:
    """One city: N regions, their attributes, and the two spatial priors."""

    features: np.ndarray          # (N, d) regional attributes
    adjacency: np.ndarray         # (N, N) binary contiguity
    distance: np.ndarray          # (N, N) km, symmetric, zero diagonal
    region_ids: tuple = ()
    d_demographic: int = 0        # first d1 feature columns are demographic
    city_id: str = ""

    def __post_init__(self):
        feats = _readonly(self.features)
        adj = _readonly(self.adjacency)
        dist = _readonly(self.distance)
        n = feats.shape[0]
        if feats.ndim != 2 or feats.shape[1] < 1:
            raise ValidationError("features must be a 2-D matrix with at least one column")
        if adj.shape != (n, n) or dist.shape != (n, n):
            raise ValidationError(
                f"adjacency/distance must be {n}x{n}, got {adj.shape} and {dist.shape}")
        if not np.isfinite(feats).all():
            raise ValidationError("features contain non-finite values")
        if not np.array_equal(adj, adj.T) or np.any(np.diag(adj) != 0):
            raise ValidationError("adjacency must be symmetric with zero diagonal")
        if not np.isin(adj, (0.0, 1.0)).all():
            raise ValidationError("adjacency entries must be 0 or 1")
        if not np.array_equal(dist, dist.T):
            raise ValidationError("distance must be symmetric")
        if np.any(np.diag(dist) != 0):
            raise ValidationError("distance diagonal must be zero")
        off = ~np.eye(n, dtype=bool)
        if n > 1 and not np.all(dist[off] > 0):
            raise ValidationError("off-diagonal distances must be strictly positive")
        if not (0 <= self.d_demographic <= feats.shape[1]):
            raise ValidationError("d_demographic out of range")
        ids = tuple(self.region_ids) if self.region_ids else tuple(range(n))
        if len(ids) != n:
            raise ValidationError(f"expected {n} region ids, got {len(ids)}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "distance", dist)
        object.__setattr__(self, "region_ids", ids)

    @property
    def n_regions(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray) -> "UrbanGraph":
        return UrbanGraph(features=features, adjacency=self.adjacency,
                          distance=self.distance, region_ids=self.region_ids,
                          d_demographic=self.d_demographic, city_id=self.city_id)


@dataclass(frozen=True)
class ODMatrix:
    """N x N flow matrix tagged with the space its entries live in."""

    flows: np.ndarray
    space_tag: str = "raw"        # "raw" commuter counts, or "log" meaning log(F+1)

    def __post_init__(self):
        f = _readonly(self.flows)
        if f.ndim != 2 or f.shape[0] != f.shape[1]:
            raise ValidationError(f"flows must be square, got shape {f.shape}")
        if self.space_tag not in ("raw", "log"):
            raise ValidationError(f"unknown space_tag {self.space_tag!r}")
        if not np.isfinite(f).all():
            raise ValidationError("flows contain non-finite values")
        if self.space_tag == "raw" and np.any(f < 0):
            raise ValidationError("raw flows must be nonnegative")
        if self.space_tag == "log" and np.any(f < -LOG_NEGATIVE_SLACK):
            raise ValidationError("log flows must be nonnegative (beyond round-off slack)")
        object.__setattr__(self, "flows", f)

    @property
    def n_regions(self) -> int:
        return self.flows.shape[0]


def log_transform(od: ODMatrix) -> ODMatrix:
    """Map raw flows F to log(F + 1), entry by entry (natural log)."""
    if od.space_tag != "raw":
        raise ValidationError("log_transform expects a raw-space matrix")
    return ODMatrix(np.log1p(od.flows), space_tag="log")


def inverse_transform(od: ODMatrix) -> ODMatrix:
    """Map log-space flows back to raw counts, exp(v) - 1, clamped at zero."""
    if od.space_tag != "log":
        raise ValidationError("inverse_transform expects a log-space matrix")
    if np.any(od.flows >= LOG_OVERFLOW_LIMIT):
        raise ValidationError(
            f"log-space entries >= {LOG_OVERFLOW_LIMIT} would overflow on exp")
    raw = np.expm1(od.flows)
    return ODMatrix(np.maximum(raw, 0.0), space_tag="raw")


def mask_features(g: UrbanGraph, ratio: float, seed: int) -> UrbanGraph:
    """Randomly hide a fraction of feature cells and impute the city mean.

    Exactly floor(ratio * N * d) cells are chosen uniformly without
    replacement under `seed`. Each masked cell is replaced by the mean of
    its column computed over the cells that were NOT masked; if a column
    loses every cell, the original full-column mean is used instead.
    """
    if not (0.0 <= ratio <= 1.0):
        raise ValidationError(f"mask ratio must be in [0, 1], got {ratio}")
    n, d = g.features.shape
    n_mask = int(np.floor(ratio * n * d))
    if n_mask == 0:
        return g
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(n * d, size=n_mask, replace=False)
    masked = np.zeros(n * d, dtype=bool)
    masked[flat_idx] = True
    masked = masked.reshape(n, d)

    feats = np.array(g.features, copy=True)
    for j in range(d):
        keep = ~masked[:, j]
        col_mean = feats[keep, j].mean() if keep.any() else g.features[:, j].mean()
        feats[masked[:, j], j] = col_mean
    return g.with_features(feats)
