"""Forward noising process, training loop, and reverse-time samplers.

Flows live in log space (log1p of the raw OD matrix) throughout. The forward
process draws F^t = sqrt(abar_t) F^0 + sqrt(1 - abar_t) eps with a cosine
alpha-bar schedule; the network is trained to regress eps with a mean squared
error over all region pairs.

Two samplers share the trained model: a deterministic strided sampler that
jumps through a subsequence of timesteps (the default, much cheaper), and a
full-length ancestral sampler kept behind a flag. The strided sampler
projects each intermediate clean estimate into a fixed plausible log range
(see X0_LOG_CAP), and both samplers clamp the final log-space matrix at
zero before mapping back to raw flows, so outputs are always valid
nonnegative OD matrices.

Seeding is hierarchical and stateless: every training step and every sample
derives its own generator from (seed, index), so runs can be resumed or
parallelized without replaying generator state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .city import LOG_OVERFLOW_LIMIT
from .errors import NumericalError, ValidationError
from .manifest import STREAM_SAMPLE, STREAM_TRAIN

DEFAULT_T = 1000
COSINE_OFFSET = 0.008
BETA_MIN = 1e-8
BETA_MAX = 0.999
# Clean log-flow estimates are projected into [0, X0_LOG_CAP] during
# sampling. exp(16) is ~9e6 commuters on a single pair, far above any real
# flow, so the projection never touches a plausible x0; without it the
# 1/sqrt(abar_T) factor (~1e4 for the clipped cosine schedule) amplifies
# early prediction error into a runaway trajectory.
X0_LOG_CAP = 16.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise coefficients; index i-1 holds values for t = i."""
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.betas) == len(self.alphas) == len(self.alpha_bars)):
            raise ValidationError("schedule arrays must share a length")
        if len(self.betas) < 1:
            raise ValidationError("schedule needs at least one step")

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal level at step t, with alpha_bar(0) = 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.n_steps:
            raise ValidationError(f"timestep {t} outside [0, {self.n_steps}]")
        return float(self.alpha_bars[t - 1])


def cosine_schedule(n_steps: int = DEFAULT_T, offset: float = COSINE_OFFSET) -> NoiseSchedule:
    """Cosine-shaped alpha-bar schedule with clipped per-step betas.

    Betas are derived from the cosine curve, clipped into
    [BETA_MIN, BETA_MAX], and the cumulative products are then rebuilt from
    the clipped values so alpha_bar(t) = alpha_bar(t-1) * alpha(t) holds
    exactly in floating point.
    """
    if n_steps < 2:
        raise ValidationError("n_steps must be >= 2")
    t = np.arange(n_steps + 1, dtype=np.float64)
    f = np.cos(((t / n_steps + offset) / (1.0 + offset)) * np.pi / 2.0) ** 2
    abar_curve = f / f[0]
    betas = 1.0 - abar_curve[1:] / abar_curve[:-1]
    betas = np.clip(betas, BETA_MIN, BETA_MAX)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(f0_log: np.ndarray, t: int, schedule: NoiseSchedule,
             eps: np.ndarray) -> np.ndarray:
    """Corrupt a clean log-space matrix to its state at step t."""
    if eps.shape != f0_log.shape:
        raise ValidationError("noise shape must match the flow matrix")
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * f0_log + np.sqrt(1.0 - abar) * eps


def _step_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def train_step(model, optimizer, schedule: NoiseSchedule, features, adjacency,
               distance, f0_log, rng: np.random.Generator):
    """One noise-regression step on a single city; returns (loss, t)."""
    t = int(rng.integers(1, schedule.n_steps + 1))
    eps = rng.standard_normal(f0_log.shape)
    ft = q_sample(f0_log, t, schedule, eps)
    optimizer.zero_grad()
    eps_hat, _ = model.forward(features, adjacency, distance, ft, t)
    diff = ad.sub(eps_hat, ad.Tensor(eps.reshape(-1, 1)))
    loss = ad.tmean(ad.mul(diff, diff))
    ad.backward(loss)
    loss_val = loss.item()
    if not np.isfinite(loss_val):
        norms = {name: float(np.max(np.abs(p.grad))) if p.grad is not None else 0.0
                 for name, p in model.parameters().items()}
        worst = max(norms, key=norms.get)
        raise NumericalError(
            f"non-finite training loss at t={t}; "
            f"largest gradient {norms[worst]:g} in {worst}")
    optimizer.step()
    return loss_val, t


def train(model, cities, schedule: NoiseSchedule, steps: int, seed: int,
          optimizer=None, lr: float = 1e-4, weight_decay: float = 0.0,
          start_step: int = 0, callback=None):
    """Train over a list of (features, adjacency, distance, f0_log) tuples.

    Each global step k draws its city, timestep, and noise from a generator
    keyed by (seed, k), so training from step s with a restored optimizer
    reproduces an uninterrupted run bit for bit.
    """
    if not cities:
        raise ValidationError("no training cities")
    if optimizer is None:
        optimizer = ad.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    losses = []
    for k in range(start_step, steps):
        rng = _step_rng(seed, STREAM_TRAIN, k)
        idx = int(rng.integers(len(cities)))
        feats, adj, dist, f0 = cities[idx]
        loss, t = train_step(model, optimizer, schedule, feats, adj, dist, f0, rng)
        losses.append(loss)
        if callback is not None:
            callback(k, loss, t)
    return optimizer, losses


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _finalize(f_log: np.ndarray) -> np.ndarray:
    """Clamp log-space output at zero and map back to raw flows."""
    clamped = np.maximum(f_log, 0.0)
    if np.any(clamped >= LOG_OVERFLOW_LIMIT):
        raise NumericalError(
            f"log-space sample reaches {clamped.max():.3g}, beyond the "
            f"exp overflow limit {LOG_OVERFLOW_LIMIT:g}")
    return np.expm1(clamped)


def ddim_sample(model, features, adjacency, distance, schedule: NoiseSchedule,
                n_sampling_steps: int, rng: np.random.Generator,
                return_log: bool = False) -> np.ndarray:
    """Deterministic strided reverse pass from pure noise.

    Requires n_sampling_steps to divide the schedule length; visits
    t = T, T-dt, ..., dt and at each step reconstructs the clean estimate
    x0 = (F^t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t), projects it into
    [0, X0_LOG_CAP], then re-noises it to the previous grid point with the
    same predicted direction. True log flows always lie inside the
    projection range, so it is a no-op for an exact denoiser.
    """
    T = schedule.n_steps
    if n_sampling_steps < 1 or T % n_sampling_steps != 0:
        raise ValidationError(
            f"sampling steps {n_sampling_steps} must divide schedule length {T}")
    dt = T // n_sampling_steps
    n = features.shape[0]
    f = rng.standard_normal((n, n))
    for t in range(T, 0, -dt):
        eps_hat = model.predict_noise(features, adjacency, distance, f, t)
        abar_t = schedule.alpha_bar(t)
        abar_prev = schedule.alpha_bar(t - dt)
        x0 = (f - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
        x0 = np.clip(x0, 0.0, X0_LOG_CAP)
        f = np.sqrt(abar_prev) * x0 + np.sqrt(1.0 - abar_prev) * eps_hat
        if not np.all(np.isfinite(f)):
            raise NumericalError(f"non-finite sampler state at t={t - dt}")
    return f if return_log else _finalize(f)


def ddpm_sample(model, features, adjacency, distance, schedule: NoiseSchedule,
                rng: np.random.Generator, return_log: bool = False) -> np.ndarray:
    """Full-length ancestral sampler with variance (1 - abar_t) per step.

    The posterior mean is computed through the clean estimate x0 (the usual
    rewrite of (F^t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t)) so the
    same [0, X0_LOG_CAP] projection as the strided sampler can bound it.
    """
    T = schedule.n_steps
    n = features.shape[0]
    f = rng.standard_normal((n, n))
    for t in range(T, 0, -1):
        eps_hat = model.predict_noise(features, adjacency, distance, f, t)
        beta = float(schedule.betas[t - 1])
        alpha = float(schedule.alphas[t - 1])
        abar = schedule.alpha_bar(t)
        abar_prev = schedule.alpha_bar(t - 1)
        x0 = (f - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
        x0 = np.clip(x0, 0.0, X0_LOG_CAP)
        mean = (np.sqrt(abar_prev) * beta * x0
                + np.sqrt(alpha) * (1.0 - abar_prev) * f) / (1.0 - abar)
        if t > 1:
            f = mean + np.sqrt(1.0 - abar) * rng.standard_normal((n, n))
        else:
            f = mean
        if not np.all(np.isfinite(f)):
            raise NumericalError(f"non-finite sampler state at t={t - 1}")
    return f if return_log else _finalize(f)


def generate_averaged(model, features, adjacency, distance,
                      schedule: NoiseSchedule, n_samples: int,
                      n_sampling_steps: int, seed: int,
                      sampler: str = "ddim"):
    """Average several independent samples in raw-flow space.

    Sample k draws all of its noise from a generator keyed by (seed, k), so
    the set of samples is invariant to evaluation order. Returns
    (mean matrix, list of per-sample matrices).
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    samples = []
    for k in range(n_samples):
        rng = _step_rng(seed, STREAM_SAMPLE, k)
        if sampler == "ddim":
            sample = ddim_sample(model, features, adjacency, distance,
                                 schedule, n_sampling_steps, rng)
        elif sampler == "ddpm":
            sample = ddpm_sample(model, features, adjacency, distance,
                                 schedule, rng)
        else:
            raise ValidationError(f"unknown sampler {sampler!r}")
        samples.append(sample)
    return np.mean(samples, axis=0), samples
