"""KernelSHAP feature attribution with background-sample replacement.

Masked-out features are replaced by background rows (never zeroed), so
perturbed inputs stay inside the empirical feature distribution. Mask values
are fit by a weighted least-squares surrogate g(z) = phi0 + sum phi_j z_j
under the Shapley kernel. The two endpoint masks enter as hard constraints,
phi0 = f(nothing kept) and sum phi = f(everything kept) - phi0, eliminated
from the regression rather than approximated with large weights, so the
efficiency identity holds to machine precision.

When the mask budget covers all 2^M - 2 interior masks the regression is
exact and reproduces classical Shapley values; otherwise masks are sampled
stratified by coalition size, allocating the budget proportional to each
size's total kernel mass and always enumerating sizes 1 and M-1 fully.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .errors import NumericalError, ValidationError


@dataclass(frozen=True)
class ShapConfig:
    target_region: int = 0
    n_mask_samples: int = 2048
    background_size: int = 64
    ridge: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.background_size < 1:
            raise ValidationError("background_size must be >= 1")
        if self.ridge < 0:
            raise ValidationError("ridge must be nonnegative")
        if self.n_mask_samples < 3:
            raise ValidationError("n_mask_samples too small")


@dataclass(frozen=True)
class ShapResult:
    phi: np.ndarray
    phi0: float
    feature_names: tuple
    target: str
    n_evaluations: int
    exact: bool

    def ranked(self):
        """Feature indices sorted by |phi| descending."""
        return np.argsort(-np.abs(self.phi), kind="stable")


def masked_evaluate(model_fn, x: np.ndarray, mask: np.ndarray,
                    background: np.ndarray) -> float:
    """Expected model output with masked features drawn from the background."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(mask, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    if z.shape != x.shape:
        raise ValidationError(f"mask length {z.shape} != feature length {x.shape}")
    if bg.ndim != 2 or bg.shape[0] == 0 or bg.shape[1] != x.size:
        raise ValidationError("background must be a nonempty (B, M) matrix")
    vals = [float(model_fn(x * z + row * (1.0 - z))) for row in bg]
    return float(np.mean(vals))


def kernel_weight(n_features: int, subset_size: int) -> float:
    """Shapley kernel (M-1) / (C(M,s) * s * (M-s)) for 0 < s < M."""
    M, s = n_features, subset_size
    if not 0 < s < M:
        raise ValidationError(f"kernel weight undefined for subset size {s} of {M}"
                              " (endpoint masks are handled as constraints)")
    return (M - 1) / (comb(M, s) * s * (M - s))


def _size_mass(M: int, s: int) -> float:
    # total kernel weight of all size-s masks
    return (M - 1) / (s * (M - s))


def _sample_masks(M: int, budget: int, rng: np.random.Generator):
    """Interior masks (rows of 0/1) plus the per-row regression weight.

    Returns (masks, weights, exact) where exact means every interior mask was
    enumerated once with its true kernel weight.
    """
    total_interior = 2 ** M - 2 if M <= 60 else None
    if total_interior is not None and total_interior <= budget:
        masks = []
        for s in range(1, M):
            for idx in combinations(range(M), s):
                row = np.zeros(M)
                row[list(idx)] = 1.0
                masks.append(row)
        weights = np.array([kernel_weight(M, int(m.sum())) for m in masks])
        return np.array(masks), weights, True

    masks = []
    sizes = []
    for s in (1, M - 1):
        for idx in combinations(range(M), s):
            row = np.zeros(M)
            row[list(idx)] = 1.0
            masks.append(row)
            sizes.append(s)
    remaining = budget - len(masks)
    mid = np.arange(2, M - 1)
    if remaining > 0 and mid.size > 0:
        mass = np.array([_size_mass(M, int(s)) for s in mid])
        alloc = np.maximum(np.round(remaining * mass / mass.sum()).astype(int), 1)
        for s, count in zip(mid, alloc):
            for _ in range(int(count)):
                row = np.zeros(M)
                row[rng.choice(M, size=int(s), replace=False)] = 1.0
                masks.append(row)
                sizes.append(int(s))
    masks = np.array(masks)
    sizes = np.array(sizes)
    # stratum weight: total size mass spread over however many rows landed there
    weights = np.empty(len(masks))
    for s in np.unique(sizes):
        sel = sizes == s
        weights[sel] = _size_mass(M, int(s)) / sel.sum()
    return masks, weights, False


def kernel_shap(model_fn, x, background, config: ShapConfig,
                feature_names=None, target: str = "model output") -> ShapResult:
    """Shapley-value estimates for one feature vector.

    Solves the kernel-weighted regression with phi0 pinned to the all-masked
    value and the efficiency sum pinned to the all-kept value; the last
    feature's coefficient is eliminated by the sum constraint. Ridge
    regularization is only engaged if the unregularized system is singular.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    bg = np.asarray(background, dtype=np.float64)
    M = x.size
    if M < 1:
        raise ValidationError("need at least one feature")
    if bg.ndim != 2 or bg.shape[0] == 0 or bg.shape[1] != M:
        raise ValidationError("background must be a nonempty (B, M) matrix")
    if config.n_mask_samples < M + 2:
        raise ValidationError(
            f"n_mask_samples={config.n_mask_samples} < M+2 = {M + 2}")
    if feature_names is None:
        feature_names = tuple(f"f{j}" for j in range(M))
    feature_names = tuple(feature_names)
    if len(feature_names) != M:
        raise ValidationError("feature_names length mismatch")

    phi0 = masked_evaluate(model_fn, x, np.zeros(M), bg)
    f_full = masked_evaluate(model_fn, x, np.ones(M), bg)
    delta = f_full - phi0
    n_evals = 2

    if M == 1:
        return ShapResult(phi=np.array([delta]), phi0=phi0,
                          feature_names=feature_names, target=target,
                          n_evaluations=n_evals, exact=True)

    rng = np.random.default_rng(config.seed)
    masks, weights, exact = _sample_masks(M, config.n_mask_samples - 2, rng)
    values = np.array([masked_evaluate(model_fn, x, m, bg) for m in masks])
    n_evals += len(masks)

    # eliminate phi_{M-1} via the efficiency constraint
    A = masks[:, :-1] - masks[:, -1:]
    b = values - phi0 - masks[:, -1] * delta
    sw = np.sqrt(weights)
    coef, _, rank, _ = np.linalg.lstsq(sw[:, None] * A, sw * b, rcond=None)
    if rank < M - 1:
        gram = (A * weights[:, None]).T @ A + config.ridge * np.eye(M - 1)
        rhs = (A * weights[:, None]).T @ b
        try:
            coef = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                "mask regression singular beyond ridge repair") from exc
    phi = np.append(coef, delta - coef.sum())
    return ShapResult(phi=phi, phi0=phi0, feature_names=feature_names,
                      target=target, n_evaluations=n_evals, exact=exact)
