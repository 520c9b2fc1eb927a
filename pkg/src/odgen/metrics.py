"""Similarity metrics between observed and generated OD matrices.

All metrics operate on raw (non-log) flows. Error metrics average over every
region pair by default; pass exclude_diagonal=True to drop intrazonal cells
from the comparison. Distributional divergence is measured three ways, on
inflows (column sums), outflows (row sums), and the flattened matrix, each
treated as a discrete probability distribution.

The divergence is the symmetrized KL (KL(P||Q) + KL(Q||P)) / 2 computed on
epsilon-smoothed, renormalized distributions; that form diverges on disjoint
supports without smoothing. The bounded mixture-based Jensen-Shannon variant
is available behind the `variant` argument.
"""
from __future__ import annotations

import warnings

import numpy as np

from .errors import NumericalError, ValidationError

JSD_EPS = 1e-12
JSD_VARIANTS = ("symmetric_kl", "mixture")


def _paired(truth, pred, exclude_diagonal):
    a = np.asarray(truth, dtype=np.float64)
    b = np.asarray(pred, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"matrices must be square and matched, "
                              f"got {a.shape} and {b.shape}")
    if exclude_diagonal:
        off = ~np.eye(a.shape[0], dtype=bool)
        return a[off], b[off]
    return a.ravel(), b.ravel()


def rmse(truth, pred, exclude_diagonal: bool = False) -> float:
    a, b = _paired(truth, pred, exclude_diagonal)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def nrmse(truth, pred, exclude_diagonal: bool = False) -> float:
    """RMSE divided by the standard deviation of the observed entries."""
    a, b = _paired(truth, pred, exclude_diagonal)
    denom = np.sqrt(np.mean((a - a.mean()) ** 2))
    if denom == 0:
        raise NumericalError("observed flows are constant; NRMSE undefined")
    return float(np.sqrt(np.mean((a - b) ** 2)) / denom)


def cpc(truth, pred, exclude_diagonal: bool = False) -> float:
    """Common part of commuting: 2 sum(min) / sum(both), in [0, 1]."""
    a, b = _paired(truth, pred, exclude_diagonal)
    if np.any(a < 0) or np.any(b < 0):
        raise ValidationError("CPC requires nonnegative flows")
    denom = a.sum() + b.sum()
    if denom == 0:
        raise ValidationError("CPC undefined: both matrices are all zero")
    return float(2.0 * np.minimum(a, b).sum() / denom)


# ---------------------------------------------------------------------------
# divergence between flow distributions
# ---------------------------------------------------------------------------

def _as_distribution(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).ravel()
    if np.any(w < 0):
        raise ValidationError("distribution weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValidationError("distribution has no mass")
    return w / total


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    pos = p > 0
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def jsd(weights_p, weights_q, variant: str = "symmetric_kl") -> float:
    """Divergence (natural log) between two nonnegative weight vectors.

    "symmetric_kl" smooths both normalized distributions by JSD_EPS per cell
    (renormalized) and returns (KL(P||Q) + KL(Q||P)) / 2, which is unbounded
    but finite after smoothing. "mixture" returns the bounded divergence
    against the even mixture, (KL(P||M) + KL(Q||M)) / 2, no smoothing needed.
    """
    p = _as_distribution(weights_p)
    q = _as_distribution(weights_q)
    if p.size != q.size:
        raise ValidationError("distributions must have equal length")
    if variant == "symmetric_kl":
        p = (p + JSD_EPS) / (1.0 + p.size * JSD_EPS)
        q = (q + JSD_EPS) / (1.0 + q.size * JSD_EPS)
        return 0.5 * (_kl(p, q) + _kl(q, p))
    if variant == "mixture":
        m = 0.5 * (p + q)
        return 0.5 * (_kl(p, m) + _kl(q, m))
    raise ValidationError(f"variant must be one of {JSD_VARIANTS}, got {variant!r}")


def jsd_suite(truth, pred, exclude_diagonal: bool = False,
              variant: str = "symmetric_kl") -> dict:
    """Divergence on inflow, outflow, and flattened OD distributions."""
    a = np.asarray(truth, dtype=np.float64)
    b = np.asarray(pred, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("matrices must be square and matched")
    if exclude_diagonal:
        a = a.copy()
        b = b.copy()
        np.fill_diagonal(a, 0.0)
        np.fill_diagonal(b, 0.0)
    return {
        "jsd_inflow": jsd(a.sum(axis=0), b.sum(axis=0), variant),
        "jsd_outflow": jsd(a.sum(axis=1), b.sum(axis=1), variant),
        "jsd_odflow": jsd(a.ravel(), b.ravel(), variant),
    }


METRIC_KEYS = ("cpc", "rmse", "nrmse", "jsd_inflow", "jsd_outflow", "jsd_odflow")


def evaluate_pair(truth, pred, exclude_diagonal: bool = False,
                  variant: str = "symmetric_kl") -> dict:
    """All six metrics for one city as a flat dict."""
    out = {
        "cpc": cpc(truth, pred, exclude_diagonal),
        "rmse": rmse(truth, pred, exclude_diagonal),
        "nrmse": nrmse(truth, pred, exclude_diagonal),
    }
    out.update(jsd_suite(truth, pred, exclude_diagonal, variant))
    return out


def aggregate_metrics(per_city: dict) -> dict:
    """Unweighted mean of each metric across cities."""
    if not per_city:
        raise ValidationError("no per-city metrics to aggregate")
    keys = next(iter(per_city.values())).keys()
    return {k: float(np.mean([row[k] for row in per_city.values()])) for k in keys}


# ---------------------------------------------------------------------------
# spatial regularity statistics
# ---------------------------------------------------------------------------

def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    sx = x.std()
    sy = y.std()
    if sx == 0 or sy == 0:
        warnings.warn("zero variance in correlation input; returning 0",
                      RuntimeWarning, stacklevel=3)
        return 0.0
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def spatial_stats(cities) -> dict:
    """Distance/adjacency regularities pooled over (flows, adjacency, distance).

    Reports the Pearson correlation between distance and log(1 + flow) over
    all off-diagonal pairs, plus mean flow and nonzero-flow rate on adjacent
    versus non-adjacent pairs. A stratum with no pairs yields NaN entries.
    """
    dists, logs, flows, adjs = [], [], [], []
    for flow_m, adj_m, dist_m in cities:
        F = np.asarray(flow_m, dtype=np.float64)
        A = np.asarray(adj_m, dtype=np.float64)
        D = np.asarray(dist_m, dtype=np.float64)
        off = ~np.eye(F.shape[0], dtype=bool)
        dists.append(D[off])
        logs.append(np.log1p(F[off]))
        flows.append(F[off])
        adjs.append(A[off] > 0)
    if not dists:
        raise ValidationError("no cities given")
    d = np.concatenate(dists)
    lf = np.concatenate(logs)
    f = np.concatenate(flows)
    adj = np.concatenate(adjs)
    if d.size < 2:
        raise ValidationError("need at least 2 off-diagonal pairs")

    def stratum(sel):
        if not np.any(sel):
            return float("nan"), float("nan")
        vals = f[sel]
        return float(vals.mean()), float(np.mean(vals > 0))

    mean_adj, rate_adj = stratum(adj)
    mean_non, rate_non = stratum(~adj)
    return {
        "dist_logflow_corr": _pearson(d, lf),
        "mean_flow_adjacent": mean_adj,
        "mean_flow_nonadjacent": mean_non,
        "nonzero_rate_adjacent": rate_adj,
        "nonzero_rate_nonadjacent": rate_non,
        "n_pairs": int(d.size),
    }


def distance_decay_profile(flows, distance, n_bins: int = 10):
    """Mean flow per equal-width distance bin.

    Square matrices are reduced to their off-diagonal pairs; 1-D inputs are
    treated as already-paired (flow, distance) samples, which lets callers
    pool several cities into one profile. Returns (bin_centers, mean_flow,
    counts); empty bins yield NaN means.
    """
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    F = np.asarray(flows, dtype=np.float64)
    D = np.asarray(distance, dtype=np.float64)
    if F.ndim == 2:
        off = ~np.eye(F.shape[0], dtype=bool)
        d = D[off]
        f = F[off]
    else:
        d = D.ravel()
        f = F.ravel()
    if d.shape != f.shape or d.size == 0:
        raise ValidationError("flows and distances must pair one to one")
    edges = np.linspace(0.0, d.max(), n_bins + 1)
    idx = np.clip(np.digitize(d, edges[1:-1]), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=f, minlength=n_bins)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, means, counts
