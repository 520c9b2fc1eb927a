"""Classical gravity-model baselines for OD matrices.

Two deterrence families: power-law decay d^-beta and exponential decay
exp(-beta d). Parameters are fit by ordinary least squares on the
log-linearized model over strictly positive off-diagonal flows; intrazonal
(diagonal) flows are outside the model and always predicted as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

KINDS = ("power", "exponential")


@dataclass(frozen=True)
class GravityParams:
    scale: float        # multiplicative constant k
    origin_exp: float   # exponent on the origin mass
    dest_exp: float     # exponent on the destination mass
    beta: float         # decay rate
    kind: str           # "power" or "exponential"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.scale <= 0:
            raise ValidationError("scale must be positive")

    def to_dict(self) -> dict:
        return {"scale": self.scale, "origin_exp": self.origin_exp,
                "dest_exp": self.dest_exp, "beta": self.beta, "kind": self.kind}


def gravity_predict(masses: np.ndarray, distance: np.ndarray,
                    params: GravityParams) -> np.ndarray:
    """Predicted OD matrix k * m_i^a * m_j^b * decay(d_ij), zero diagonal."""
    m = np.asarray(masses, dtype=np.float64)
    d = np.asarray(distance, dtype=np.float64)
    if m.ndim != 1 or d.shape != (m.size, m.size):
        raise ValidationError("masses must be (n,) and distance (n, n)")
    if np.any(m <= 0):
        raise ValidationError("masses must be strictly positive")
    off = ~np.eye(m.size, dtype=bool)
    if np.any(d[off] <= 0):
        raise ValidationError("off-diagonal distances must be positive")
    if params.kind == "power":
        with np.errstate(divide="ignore"):
            decay = np.where(off, d, 1.0) ** (-params.beta)
    else:
        decay = np.exp(-params.beta * d)
    pred = params.scale * np.outer(m ** params.origin_exp,
                                   m ** params.dest_exp) * decay
    np.fill_diagonal(pred, 0.0)
    if not np.all(np.isfinite(pred)):
        raise NumericalError("gravity prediction overflowed")
    return pred


def gravity_fit(cities, kind: str = "power") -> GravityParams:
    """Least-squares fit of the log-linearized gravity model, pooled over cities.

    `cities` is a sequence of (masses, distance, flows) triples; one triple
    fits a single city. Only strictly positive off-diagonal flows enter the
    regression ln F = ln k + a ln m_i + b ln m_j - beta g(d), with g = ln d
    for the power family and g = d for the exponential one. A rank-deficient
    design (too few pairs, or all masses identical) cannot identify the four
    parameters and raises.
    """
    if kind not in KINDS:
        raise ValidationError(f"kind must be one of {KINDS}, got {kind!r}")
    rows_X, rows_y = [], []
    for masses, distance, flows in cities:
        m = np.asarray(masses, dtype=np.float64)
        d = np.asarray(distance, dtype=np.float64)
        F = np.asarray(flows, dtype=np.float64)
        n = m.size
        if F.shape != (n, n) or d.shape != (n, n):
            raise ValidationError("flows and distance must be (n, n)")
        if np.any(m <= 0):
            raise ValidationError("masses must be strictly positive")
        use = (~np.eye(n, dtype=bool)) & (F > 0)
        if np.any(d[use] <= 0):
            raise ValidationError("positive flows on nonpositive distances")
        i_idx, j_idx = np.nonzero(use)
        if i_idx.size == 0:
            continue
        g = np.log(d[use]) if kind == "power" else d[use]
        rows_X.append(np.column_stack([np.ones(i_idx.size), np.log(m[i_idx]),
                                       np.log(m[j_idx]), -g]))
        rows_y.append(np.log(F[use]))
    if not rows_X:
        raise ValidationError("no positive off-diagonal flows to fit")
    X = np.vstack(rows_X)
    y = np.concatenate(rows_y)
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if X.shape[0] < X.shape[1] or rank < X.shape[1]:
        raise NumericalError(
            f"gravity design matrix is rank deficient "
            f"(rank {rank} of {X.shape[1]} over {X.shape[0]} pairs)")
    return GravityParams(scale=float(np.exp(coef[0])), origin_exp=float(coef[1]),
                         dest_exp=float(coef[2]), beta=float(coef[3]), kind=kind)
