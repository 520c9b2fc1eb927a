"""Urban-structure indicators and the monocentric/uniform/polycentric classifier.

Each city is scored along three dimensions: population (pareto exponent,
primacy ratio, gini, hhi over the population vector), flow (gini, hhi, max
share, max betweenness over per-region total outflow), and commuting distance
(same four over the per-origin flow-weighted total trip distance). Indicators
are z-scored across cities, each dimension is collapsed to its first
principal component (sign-fixed so the gini loading is positive, i.e. higher
score = more concentrated), the three scores are averaged into a composite,
and k-means with k=3 over (scores, composite) splits the cities into groups.
Groups are named by mean composite: highest monocentric, middle uniform,
lowest polycentric.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

LABELS = ("monocentric", "uniform", "polycentric")
SIZE_SMALL_MAX = 10
SIZE_MEDIUM_MAX = 50

POPULATION_KEYS = ("pareto", "primacy", "gini", "hhi")
FLOW_KEYS = ("gini", "hhi", "mfs", "mbc")
DIMENSIONS = ("population", "flow", "distance")


def _positive_vector(x, what: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValidationError(f"{what}: empty vector")
    if np.any(v < 0):
        raise ValidationError(f"{what}: negative entries")
    return v


def gini(x) -> float:
    """Mean absolute difference over twice the mean: 0 balanced, ->1 concentrated."""
    v = _positive_vector(x, "gini")
    if v.sum() == 0:
        raise ValidationError("gini undefined for an all-zero vector")
    diffs = np.abs(v[:, None] - v[None, :]).sum()
    return float(diffs / (2.0 * v.size ** 2 * v.mean()))


def hhi(x) -> float:
    """Sum of squared shares."""
    v = _positive_vector(x, "hhi")
    total = v.sum()
    if total == 0:
        raise ValidationError("hhi undefined for a zero-sum vector")
    shares = v / total
    return float(np.sum(shares ** 2))


def mfs(x) -> float:
    """Largest share of the total."""
    v = _positive_vector(x, "mfs")
    total = v.sum()
    if total == 0:
        raise ValidationError("mfs undefined for a zero-sum vector")
    return float(v.max() / total)


def betweenness_centrality(adjacency) -> np.ndarray:
    """Per-node betweenness over unordered pairs of the unweighted graph.

    Breadth-first shortest-path counting with back-propagated dependencies;
    disconnected graphs are scored over reachable pairs only.
    """
    A = np.asarray(adjacency)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValidationError("adjacency must be square")
    neighbors = [np.nonzero(A[v] > 0)[0] for v in range(n)]
    bc = np.zeros(n)
    for s in range(n):
        order = []
        preds = [[] for _ in range(n)]
        sigma = np.zeros(n)
        sigma[s] = 1.0
        dist = np.full(n, -1)
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            order.append(v)
            for w in neighbors[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(n)
        for w in reversed(order):
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                bc[w] += delta[w]
    return bc / 2.0  # each unordered pair was counted from both endpoints


def max_betweenness(adjacency) -> float:
    """Maximum normalized betweenness; 0 with a warning for N < 3."""
    A = np.asarray(adjacency)
    n = A.shape[0]
    if n < 3:
        warnings.warn("betweenness undefined for N < 3; returning 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    reach = _reachable_count(A)
    if reach < n:
        warnings.warn("adjacency graph is disconnected; betweenness computed "
                      "over reachable pairs", RuntimeWarning, stacklevel=2)
    norm = (n - 1) * (n - 2) / 2.0
    return float(betweenness_centrality(A).max() / norm)


def _reachable_count(A) -> int:
    n = A.shape[0]
    seen = {0}
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for w in np.nonzero(A[v] > 0)[0]:
            if w not in seen:
                seen.add(w)
                queue.append(int(w))
    return len(seen)


def pareto_exponent(p) -> float:
    """Power-law imbalance exponent of a population vector.

    Requires every entry >= 1 (counts). All-equal populations make the
    denominator vanish; that degenerate case returns NaN rather than a
    number, and callers should treat it as a flag.
    """
    v = np.asarray(p, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValidationError("pareto: empty vector")
    if np.any(v < 1):
        raise ValidationError("pareto requires populations >= 1")
    log_max = np.log(v.max())
    if log_max == 0:
        return float("nan")
    ratio = np.sum(np.log(v)) / (v.size * log_max)
    if ratio >= 1.0:
        return float("nan")
    return float(1.0 / (1.0 - ratio))


def primacy(p) -> tuple[float, bool]:
    """Largest region over the sum of the next three; (value, padded flag).

    Cities with fewer than 4 regions use whatever second-tier regions exist
    and are flagged. A single-region city has an empty denominator and
    returns (NaN, True).
    """
    v = np.sort(_positive_vector(p, "primacy"))[::-1]
    padded = v.size < 4
    tail = v[1:4]
    denom = tail.sum()
    if denom == 0:
        return float("nan"), True
    return float(v[0] / denom), padded


# ---------------------------------------------------------------------------
# per-city indicator table
# ---------------------------------------------------------------------------

def city_indicators(population, flows, distance, adjacency) -> dict:
    """All twelve indicators for one city, grouped by dimension.

    Flow dimension vector: per-region total outflow. Distance dimension
    vector: per-origin flow-weighted total trip distance sum_j F_ij d_ij.
    """
    pop = np.asarray(population, dtype=np.float64).ravel()
    F = np.asarray(flows, dtype=np.float64)
    D = np.asarray(distance, dtype=np.float64)
    outflow = F.sum(axis=1)
    trip_dist = (F * D).sum(axis=1)
    mbc = max_betweenness(adjacency)
    pareto = pareto_exponent(pop)
    prim, padded = primacy(pop)
    return {
        "population": {"pareto": pareto, "primacy": prim,
                       "gini": gini(pop), "hhi": hhi(pop)},
        "flow": {"gini": gini(outflow), "hhi": hhi(outflow),
                 "mfs": mfs(outflow), "mbc": mbc},
        "distance": {"gini": gini(trip_dist), "hhi": hhi(trip_dist),
                     "mfs": mfs(trip_dist), "mbc": mbc},
        "flags": {"pareto_degenerate": bool(np.isnan(pareto)),
                  "primacy_padded": bool(padded or np.isnan(prim))},
    }


def size_category(n_regions: int) -> str:
    if n_regions <= SIZE_SMALL_MAX:
        return "small"
    if n_regions <= SIZE_MEDIUM_MAX:
        return "medium"
    return "large"


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def _kmeans_once(X: np.ndarray, k: int, rng: np.random.Generator):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total == 0:
            idx = int(rng.integers(n))
        else:
            r = rng.random() * total
            idx = min(int(np.searchsorted(np.cumsum(d2), r, side="right")), n - 1)
        centers[c] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[c]) ** 2, axis=1))

    assign = np.zeros(n, dtype=int)
    for _ in range(300):
        dists = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dists, axis=1)  # argmin favors the lowest index on ties
        new_centers = centers.copy()
        for c in range(k):
            members = assign == c
            if np.any(members):
                new_centers[c] = X[members].mean(axis=0)
        if np.array_equal(new_centers, centers):
            break
        centers = new_centers
    inertia = float(np.sum((X - centers[assign]) ** 2))
    return assign, centers, inertia


def kmeans(X: np.ndarray, k: int, seed: int, restarts: int = 50):
    """Seeded k-means++ with restarts; lowest inertia wins, first on ties."""
    if X.shape[0] < k:
        raise ValidationError(f"k-means needs at least {k} points, got {X.shape[0]}")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        result = _kmeans_once(X, k, rng)
        if best is None or result[2] < best[2]:
            best = result
    return best


# ---------------------------------------------------------------------------
# classification pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StructureReport:
    city_id: str
    n_regions: int
    indicators: dict
    dimension_scores: dict
    composite: float
    label: str
    size_category: str
    flags: tuple


def _zscore_columns(X: np.ndarray) -> np.ndarray:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (X - mean) / std


def _dimension_score(z: np.ndarray, gini_col: int) -> np.ndarray:
    """First-principal-component projection, gini loading forced positive."""
    _, _, vt = np.linalg.svd(z, full_matrices=False)
    v = vt[0]
    if v[gini_col] < 0:
        v = -v
    return z @ v


def classify(cities, seed: int, population_index: int = 0,
             weights=(1.0 / 3, 1.0 / 3, 1.0 / 3),
             include_raw_indicators: bool = False,
             restarts: int = 50, city_ids=None):
    """Score and cluster cities into the three structural types.

    `cities` is a sequence of (UrbanGraph, ODMatrix) pairs with raw-space
    flows; populations are read from the given feature column. Returns a
    list of StructureReport in input order.
    """
    cities = list(cities)
    if len(cities) < 3:
        raise ValidationError(f"classification needs >= 3 cities, got {len(cities)}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (3,) or np.any(weights < 0) or weights.sum() == 0:
        raise ValidationError("weights must be 3 nonnegative values, not all zero")
    weights = weights / weights.sum()
    if city_ids is None:
        city_ids = [g.city_id for g, _ in cities]

    rows = []
    for (g, od), cid in zip(cities, city_ids):
        if od.space_tag != "raw":
            raise ValidationError(f"{cid}: classifier expects raw-space flows")
        pop = g.features[:, population_index]
        rows.append(city_indicators(pop, od.flows, g.distance, g.adjacency))

    tables = {}
    for dim, keys in (("population", POPULATION_KEYS), ("flow", FLOW_KEYS),
                      ("distance", FLOW_KEYS)):
        tab = np.array([[row[dim][k] for k in keys] for row in rows])
        bad = np.nonzero(~np.isfinite(tab))[0]
        if bad.size:
            raise NumericalError(
                f"degenerate {dim} indicators for cities "
                f"{[city_ids[i] for i in sorted(set(bad.tolist()))]}")
        tables[dim] = _zscore_columns(tab)

    scores = np.column_stack([
        _dimension_score(tables["population"], POPULATION_KEYS.index("gini")),
        _dimension_score(tables["flow"], FLOW_KEYS.index("gini")),
        _dimension_score(tables["distance"], FLOW_KEYS.index("gini")),
    ])
    composite = scores @ weights

    feats = np.column_stack([scores, composite])
    if include_raw_indicators:
        feats = np.column_stack([feats] + [tables[d] for d in DIMENSIONS])
    assign, _, _ = kmeans(feats, 3, seed, restarts)

    cluster_mean = np.full(3, -np.inf)
    for c in range(3):
        members = assign == c
        if np.any(members):
            cluster_mean[c] = composite[members].mean()
    order = np.argsort(-cluster_mean)  # descending composite
    label_of = {int(order[i]): LABELS[i] for i in range(3)}

    reports = []
    for i, ((g, _), row) in enumerate(zip(cities, rows)):
        flags = tuple(sorted(k for k, v in row["flags"].items() if v))
        reports.append(StructureReport(
            city_id=city_ids[i],
            n_regions=g.n_regions,
            indicators={d: dict(row[d]) for d in DIMENSIONS},
            dimension_scores={"population": float(scores[i, 0]),
                              "flow": float(scores[i, 1]),
                              "distance": float(scores[i, 2])},
            composite=float(composite[i]),
            label=label_of[int(assign[i])],
            size_category=size_category(g.n_regions),
            flags=flags,
        ))
    return reports
