"""Discrete-time diffusion core: noise schedules and single reverse steps.

Conventions used throughout the package:

* time indices ``t`` run over ``{0, 1, ..., T}``; ``t = 0`` is clean data,
  ``t = T`` is maximum noise;
* per-step variances ``beta_t`` live at ``t = 1..T`` and are stored 0-based
  (``betas[t-1]``);
* ``alpha_t = 1 - beta_t`` and ``bar_alpha_t = prod_{i<=t} alpha_i`` with the
  sentinel ``bar_alpha_0 = 1``, so the forward marginal is
  ``x_t = sqrt(bar_alpha_t) x_0 + sqrt(1 - bar_alpha_t) eps``.

All state vectors are float64 and all functions are pure; they broadcast
over leading axes, so a population of chains is just an ``(n, D)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """The beta/alpha/bar_alpha ladder indexing all time-dependent quantities."""

    betas: np.ndarray
    alphas: np.ndarray
    bar_alphas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a nonempty 1-D array")
        if not np.all(np.isfinite(betas)):
            raise ValueError("betas must be finite")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", np.asarray(self.alphas, dtype=float))
        object.__setattr__(self, "bar_alphas", np.asarray(self.bar_alphas, dtype=float))
        if self.alphas.shape != betas.shape or self.bar_alphas.shape != betas.shape:
            raise ValueError("betas, alphas, bar_alphas must share one shape")

    @property
    def T(self) -> int:
        return self.betas.size

    def beta(self, t: int) -> float:
        self._check_t(t, low=1)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t, low=1)
        return float(self.alphas[t - 1])

    def bar_alpha(self, t: int) -> float:
        self._check_t(t, low=0)
        return 1.0 if t == 0 else float(self.bar_alphas[t - 1])

    def _check_t(self, t: int, low: int) -> None:
        if not (low <= t <= self.T):
            raise ValueError(f"time index {t} outside [{low}, {self.T}]")


def make_linear_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Schedule with beta interpolated linearly from beta_min to beta_max, endpoints inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError("T must be an integer >= 1")
    if not (np.isfinite(beta_min) and np.isfinite(beta_max)):
        raise ValueError("beta bounds must be finite")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, bar_alphas=np.cumprod(alphas))


def default_schedule(T: int = 1000) -> NoiseSchedule:
    """The standard dense ladder: linear beta from 1e-4 to 0.02."""
    return make_linear_schedule(T, 1e-4, 0.02)


def subsample_times(T_dense: int, n: int) -> np.ndarray:
    """Evenly spaced dense indices ``t_1 < ... < t_n = T_dense`` (half-up rounding)."""
    if not (1 <= n <= T_dense):
        raise ValueError("need 1 <= n <= T_dense")
    i = np.arange(1, n + 1, dtype=np.int64)
    return (2 * i * T_dense + n) // (2 * n)


def restrict_schedule(dense: NoiseSchedule, times: np.ndarray) -> NoiseSchedule:
    """Schedule over the sub-ladder ``times``, reading bar_alpha off the dense ladder.

    Level ``i`` of the result has ``bar_alpha_i = dense.bar_alpha(times[i-1])``;
    the per-level betas are whatever makes the cumulative product work out.
    """
    times = np.asarray(times, dtype=np.int64)
    if times.ndim != 1 or times.size < 1:
        raise ValueError("times must be a nonempty 1-D index array")
    if np.any(times < 1) or np.any(times > dense.T) or np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing indices in [1, T]")
    bar = dense.bar_alphas[times - 1]
    prev = np.concatenate([[1.0], bar[:-1]])
    alphas = bar / prev
    return NoiseSchedule(betas=1.0 - alphas, alphas=alphas, bar_alphas=bar)


def forward_marginal(x0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noise clean data to level ``t``: ``sqrt(ab_t) x0 + sqrt(1-ab_t) noise``."""
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != x0.shape:
        raise ValueError("noise must have the same shape as x0")
    ab = schedule.bar_alpha(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def score_from_eps(eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Convert a noise prediction into the marginal score: ``-eps / sqrt(1-ab_t)``."""
    ab = schedule.bar_alpha(t)
    if ab >= 1.0:
        raise ValueError("score undefined at t=0 (bar_alpha = 1)")
    return -np.asarray(eps, dtype=float) / np.sqrt(1.0 - ab)


def eps_from_score(score: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Inverse of :func:`score_from_eps`."""
    ab = schedule.bar_alpha(t)
    if ab >= 1.0:
        raise ValueError("eps undefined at t=0 (bar_alpha = 1)")
    return -np.asarray(score, dtype=float) * np.sqrt(1.0 - ab)


def tweedie_x0hat(x_t: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Posterior-mean denoising estimate ``(x_t - sqrt(1-ab_t) eps) / sqrt(ab_t)``."""
    x_t = np.asarray(x_t, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps.shape != x_t.shape:
        raise ValueError("eps must have the same shape as x_t")
    ab = schedule.bar_alpha(t)
    if ab <= 0.0:
        raise ValueError("bar_alpha must be positive")
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def beta_tilde(t: int, schedule: NoiseSchedule) -> float:
    """Reverse-step variance ``(1 - ab_{t-1}) / (1 - ab_t) * beta_t``; zero at t=1."""
    ab_prev = schedule.bar_alpha(t - 1)
    ab = schedule.bar_alpha(t)
    return (1.0 - ab_prev) / (1.0 - ab) * schedule.beta(t)


def ddpm_step(
    x_t: np.ndarray,
    eps: np.ndarray,
    t: int,
    z: np.ndarray | None,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One ancestral reverse step from level ``t`` to ``t - 1``.

    Returns ``mu(x_t, t) + sqrt(beta_tilde_t) z`` with
    ``mu = (x_t - beta_t / sqrt(1-ab_t) * eps) / sqrt(1-beta_t)``.
    """
    if t < 1:
        raise ValueError("ddpm_step requires t >= 1")
    x_t = np.asarray(x_t, dtype=float)
    eps = np.asarray(eps, dtype=float)
    b = schedule.beta(t)
    ab = schedule.bar_alpha(t)
    mean = (x_t - b / np.sqrt(1.0 - ab) * eps) / np.sqrt(1.0 - b)
    bt = beta_tilde(t, schedule)
    if z is None:
        return mean
    return mean + np.sqrt(bt) * np.asarray(z, dtype=float)


def ddim_step(
    x_t: np.ndarray,
    eps: np.ndarray,
    t: int,
    t_prev: int,
    sigma_ddim: float,
    z: np.ndarray | None,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One (possibly skipping) reverse step from level ``t`` to ``t_prev``.

    ``sqrt(ab_prev) x0hat + sqrt(1 - ab_prev - sigma^2) eps + sigma z``; the
    default ``sigma_ddim = 0`` gives the deterministic map. ``sigma_ddim``
    is the transition noise knob, unrelated to measurement noise.
    """
    if not (0 <= t_prev < t):
        raise ValueError("need 0 <= t_prev < t")
    ab_prev = schedule.bar_alpha(t_prev)
    if sigma_ddim < 0.0 or sigma_ddim**2 > 1.0 - ab_prev + 1e-15:
        raise ValueError("need 0 <= sigma_ddim^2 <= 1 - bar_alpha_{t_prev}")
    x0 = tweedie_x0hat(x_t, eps, t, schedule)
    rest = max(1.0 - ab_prev - sigma_ddim**2, 0.0)
    out = np.sqrt(ab_prev) * x0 + np.sqrt(rest) * np.asarray(eps, dtype=float)
    if sigma_ddim > 0.0:
        if z is None:
            raise ValueError("z required when sigma_ddim > 0")
        out = out + sigma_ddim * np.asarray(z, dtype=float)
    return out
