"""Synthetic cities for desk-scale experiments.

Regions are scattered around 1..4 planar centers; adjacency comes from a
Delaunay triangulation of the centroids (k-nearest fallback for tiny N),
populations peak near the centers, and flows follow a gravity law with
exponential distance decay, an adjacency boost, and multiplicative
log-normal noise. Intra-region flows use a notional self-distance of half
the nearest-neighbor distance, so diagonals are populated even though the
stored distance matrix keeps its zero diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .city import ODMatrix, UrbanGraph
from .dataset import CityRecord, Dataset
from .errors import ValidationError

FEATURE_NAMES = ["population", "households", "workers",
                 "poi_retail", "poi_office", "poi_leisure"]
D_DEMOGRAPHIC = 3


@dataclass(frozen=True)
class SynthSpec:
    n_regions: int
    centers: int = 2
    decay: float = 0.25          # per km, exponential distance decay of flows
    extent_km: float = 20.0
    pop_base: float = 3000.0
    mean_flow: float = 40.0
    flow_noise: float = 0.15     # sigma of multiplicative log-normal noise
    adjacency_boost: float = 1.6
    mass_exp: float = 0.9        # origin and destination mass exponents

    def __post_init__(self):
        if not (3 <= self.n_regions <= 100):
            raise ValidationError(f"n_regions must be in [3, 100], got {self.n_regions}")
        if not (1 <= self.centers <= 4):
            raise ValidationError(f"centers must be in 1..4, got {self.centers}")
        if self.decay <= 0:
            raise ValidationError("decay rate must be positive")


def synth_city(spec: SynthSpec, seed: int, city_id: str = "synth"):
    """Generate one city. Same (spec, seed) gives bitwise-identical output."""
    rng = np.random.default_rng(seed)
    n = spec.n_regions

    centers = rng.uniform(0.25 * spec.extent_km, 0.75 * spec.extent_km,
                          size=(spec.centers, 2))
    assign = rng.integers(0, spec.centers, size=n)
    pts = centers[assign] + rng.normal(0.0, spec.extent_km / 8.0, size=(n, 2))
    # coincident centroids would violate the strictly-positive-distance invariant
    for _ in range(32):
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        if np.all(dist[~np.eye(n, dtype=bool)] > 1e-9):
            break
        pts = pts + rng.normal(0.0, 1e-6, size=(n, 2))
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)

    adjacency = _planar_adjacency(pts)

    center_dist = np.sqrt(((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    pop_sigma = spec.extent_km / 5.0
    pop = spec.pop_base * np.exp(-center_dist ** 2 / (2 * pop_sigma ** 2))
    pop = np.maximum(pop * rng.lognormal(0.0, 0.3, size=n), 1.0)

    features = _feature_columns(pop, rng)
    flows = _gravity_flows(pop, dist, adjacency, spec.decay, spec.mean_flow,
                           spec.adjacency_boost, spec.flow_noise,
                           spec.mass_exp, rng)

    graph = UrbanGraph(features=features, adjacency=adjacency, distance=dist,
                       region_ids=tuple(f"{city_id}-r{i:03d}" for i in range(n)),
                       d_demographic=D_DEMOGRAPHIC, city_id=city_id)
    return graph, ODMatrix(flows, space_tag="raw")


def _feature_columns(pop: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Demographic and POI columns correlated with the population vector."""
    n = pop.size
    households = pop / 2.5 * rng.lognormal(0.0, 0.1, size=n)
    workers = pop * 0.45 * rng.lognormal(0.0, 0.1, size=n)
    poi_retail = pop ** 0.8 * 0.05 * rng.lognormal(0.0, 0.4, size=n)
    poi_office = pop ** 1.0 * 0.01 * rng.lognormal(0.0, 0.4, size=n)
    poi_leisure = pop ** 0.6 * 0.10 * rng.lognormal(0.0, 0.4, size=n)
    return np.column_stack([pop, households, workers,
                            poi_retail, poi_office, poi_leisure])


def _gravity_flows(pop, dist, adjacency, decay, mean_flow, boost, noise,
                   mass_exp, rng) -> np.ndarray:
    """Gravity-with-noise law; self-flows use half the nearest-neighbor distance."""
    n = pop.size
    d_eff = dist.copy()
    nearest = np.where(dist > 0, dist, np.inf).min(axis=1)
    np.fill_diagonal(d_eff, 0.5 * nearest)
    base = np.outer(pop ** mass_exp, pop ** mass_exp) * np.exp(-decay * d_eff)
    base[adjacency == 1] *= boost
    base *= mean_flow / base.mean()
    return base * rng.lognormal(0.0, noise, size=(n, n))


def _planar_adjacency(pts: np.ndarray) -> np.ndarray:
    """Delaunay neighbor graph, symmetrized; k-nearest (k=3) for tiny/degenerate inputs."""
    n = pts.shape[0]
    adj = np.zeros((n, n))
    if n >= 5:
        try:
            tri = Delaunay(pts)
            for simplex in tri.simplices:
                for a in simplex:
                    for b in simplex:
                        if a != b:
                            adj[a, b] = 1.0
            return adj
        except QhullError:
            pass
    k = min(3, n - 1)
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt((diff ** 2).sum(axis=2))
    np.fill_diagonal(d, np.inf)
    for i in range(n):
        for j in np.argsort(d[i], kind="stable")[:k]:
            adj[i, j] = 1.0
            adj[j, i] = 1.0
    return adj


ARCHETYPES = ("monocentric", "uniform", "polycentric")


def archetype_city(kind: str, n_regions: int, seed: int, city_id: str = ""):
    """A city with a planted structural type, for classifier experiments.

    Monocentric piles most population into one region, polycentric splits it
    between two distant regions, uniform spreads it evenly. Flows follow the
    same gravity law as synth_city with small multiplicative noise, so each
    replica of a kind differs slightly but the groups stay far apart in
    indicator space.
    """
    if kind not in ARCHETYPES:
        raise ValidationError(f"kind must be one of {ARCHETYPES}, got {kind!r}")
    if n_regions < 5:
        raise ValidationError("archetype cities need at least 5 regions")
    rng = np.random.default_rng(seed)
    n = n_regions
    extent = 20.0
    pts = rng.uniform(0.0, extent, size=(n, 2))
    for _ in range(32):
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        if np.all(dist[~np.eye(n, dtype=bool)] > 1e-9):
            break
        pts = pts + rng.normal(0.0, 1e-6, size=(n, 2))
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    adjacency = _planar_adjacency(pts)

    base = 800.0 * rng.lognormal(0.0, 0.05, size=n)
    pop = base.copy()
    if kind == "monocentric":
        pop[0] = 60000.0 * rng.lognormal(0.0, 0.05)
    elif kind == "polycentric":
        # put the two peaks on the farthest-apart pair of regions
        i, j = np.unravel_index(np.argmax(dist), dist.shape)
        pop[i] = 25000.0 * rng.lognormal(0.0, 0.05)
        pop[j] = 25000.0 * rng.lognormal(0.0, 0.05)
    else:
        pop = 3000.0 * rng.lognormal(0.0, 0.05, size=n)
    pop = np.maximum(pop, 1.0)

    features = _feature_columns(pop, rng)
    flows = _gravity_flows(pop, dist, adjacency, decay=0.15, mean_flow=40.0,
                           boost=1.3, noise=0.05, mass_exp=1.0, rng=rng)
    cid = city_id or f"{kind}-{seed}"
    graph = UrbanGraph(features=features, adjacency=adjacency, distance=dist,
                       region_ids=tuple(f"{cid}-r{i:03d}" for i in range(n)),
                       d_demographic=D_DEMOGRAPHIC, city_id=cid)
    return graph, ODMatrix(flows, space_tag="raw")


def make_archetype_set(n_replicas: int = 5, n_regions: int = 15, seed: int = 0):
    """Replicated archetypes; returns (pairs, true_kind_labels)."""
    pairs, kinds = [], []
    for kind in ARCHETYPES:
        for r in range(n_replicas):
            child = int(np.random.SeedSequence([seed, ARCHETYPES.index(kind), r])
                        .generate_state(1)[0])
            pairs.append(archetype_city(kind, n_regions, child,
                                        city_id=f"{kind}{r:02d}"))
            kinds.append(kind)
    return pairs, kinds


def make_dataset(n_cities: int, n_min: int, n_max: int, seed: int,
                 decay: float = 0.25, flow_noise: float = 0.15) -> Dataset:
    """A seeded multi-city dataset with an 8:1:1 train/val/test split."""
    if n_cities < 3:
        raise ValidationError("need at least 3 cities for a 3-way split")
    if not (3 <= n_min <= n_max <= 100):
        raise ValidationError("city sizes must satisfy 3 <= n_min <= n_max <= 100")
    rng = np.random.default_rng(seed)
    n_train = int(round(0.8 * n_cities))
    n_val = max(1, int(round(0.1 * n_cities)))
    records = []
    for i in range(n_cities):
        spec = SynthSpec(
            n_regions=int(rng.integers(n_min, n_max + 1)),
            centers=int(rng.integers(1, 4)),
            decay=decay,
            flow_noise=flow_noise,
        )
        child_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        graph, od = synth_city(spec, child_seed, city_id=f"city{i:03d}")
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        records.append(CityRecord(graph=graph, od=od, split=split))
    return Dataset(records=records, feature_names=list(FEATURE_NAMES),
                   population_column="population")
