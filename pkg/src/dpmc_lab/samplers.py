"""Guided reverse-diffusion samplers for noisy inverse problems.

Two inference algorithms share one guidance kernel (the gradient of the
plain, non-squared data residual through the denoised mean):

* ``dps_sample`` — at every level, an ancestral reverse step followed by a
  guidance subtraction with constant step ``zeta`` (the adaptive step of the
  squared-residual form collapses onto the unit-norm gradient, absorbing the
  factor 2 into ``zeta``).
* ``dpmc_sample`` — annealed MCMC over guidance-tilted intermediate
  distributions: per level an unconditional deterministic proposal, then K
  unadjusted Langevin steps on the tilted target, with plain guided steps on
  the first 30% / last 10% of levels (configurable window).

Populations of chains are first-class: pass ``n_chains`` and every state is
an ``(n, D)`` array advanced in lockstep; the per-chain evaluation count is
unchanged. All samplers evaluate the model only through ``denoise``; one
``denoise`` call is one NFE per chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, ddim_step, ddpm_step, restrict_schedule, subsample_times
from .operators import Measurement
from .scores import CountingModel, Denoised, ScoreModel

RESIDUAL_FLOOR = 1e-12


class SamplerDiverged(RuntimeError):
    """Raised when a chain state stops being finite."""


@dataclass(frozen=True)
class DPSConfig:
    T: int
    zeta: float
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not np.isfinite(self.zeta) or self.zeta < 0.0:
            raise ValueError("zeta must be finite and >= 0")


@dataclass(frozen=True)
class DPMCConfig:
    T: int
    K: int
    eta: float
    xi: float
    xi_exponent: float = 3.0
    window: tuple = (0.30, 0.60, 0.10)
    restarts: int = 1
    seed: int = 0
    window_zeta: float | None = None  # guidance constant for the plain-step windows; defaults to xi
    window_step: str = "ddpm"  # transition kind inside the plain-step windows

    def __post_init__(self):
        if self.T < 1 or self.K < 1 or self.restarts < 1:
            raise ValueError("T, K and restarts must be >= 1")
        if self.eta < 0.0 or self.xi < 0.0:
            raise ValueError("eta and xi must be >= 0")
        w = np.asarray(self.window, dtype=float)
        if w.shape != (3,) or np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("window must be three nonnegative fractions summing to 1")
        object.__setattr__(self, "window", (float(w[0]), float(w[1]), float(w[2])))
        if self.window_step not in ("ddpm", "ddim"):
            raise ValueError("window_step must be 'ddpm' or 'ddim'")


def window_counts(T: int, window) -> tuple[int, int, int]:
    """Deterministic level partition: head/tail floored, middle the remainder."""
    head = math.floor(window[0] * T)
    tail = math.floor(window[2] * T)
    return head, T - head - tail, tail


def nfe_of(cfg) -> int:
    """Model evaluations one candidate chain will consume."""
    if isinstance(cfg, DPSConfig):
        return cfg.T
    if isinstance(cfg, DPMCConfig):
        head, mid, tail = window_counts(cfg.T, cfg.window)
        return head + tail + mid * (1 + cfg.K)
    raise TypeError(f"unknown config type {type(cfg).__name__}")


@dataclass
class SampleRun:
    """Outcome of one sampling run (possibly many chains and restarts)."""

    candidates: np.ndarray  # (restarts, n, D)
    residuals: np.ndarray  # (restarts, n)
    best: np.ndarray  # (n,) restart index with minimum residual
    nfe: int  # per-candidate model evaluations
    diagnostics: list = field(default_factory=list)

    @property
    def samples(self) -> np.ndarray:
        """Best candidate per chain, shape (n, D)."""
        return self.candidates[self.best, np.arange(self.candidates.shape[1])]


def _guidance(den: Denoised, meas: Measurement) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ||y - A(x0hat)|| w.r.t. the state, and the residual norms.

    Chains the operator VJP through the x0hat VJP and divides by the norm;
    rows with residual below RESIDUAL_FLOOR get the zero subgradient.
    """
    r = meas.y - meas.operator.apply(den.x0hat)
    rnorm = np.linalg.norm(np.atleast_2d(r), axis=-1)
    safe = np.maximum(rnorm, RESIDUAL_FLOOR)
    pulled = meas.operator.vjp(den.x0hat, r)
    grad = -den.vjp(pulled) / safe.reshape(r.shape[:-1] + (1,) if r.ndim > 1 else (1,))
    if r.ndim == 1:
        grad = np.where(rnorm[0] < RESIDUAL_FLOOR, 0.0, grad)
        return grad, float(rnorm[0])
    grad = np.where((rnorm < RESIDUAL_FLOOR).reshape(-1, 1), 0.0, grad)
    return grad, rnorm


def guidance_grad(model: ScoreModel, meas: Measurement, x_t: np.ndarray, t: int):
    """Standalone guidance gradient; costs one model evaluation."""
    return _guidance(model.denoise(x_t, t), meas)


def guided_score(
    model: ScoreModel, meas: Measurement, x_t: np.ndarray, t: int, xi_t: float
) -> np.ndarray:
    """Score of the tilted intermediate target: score - xi_t * guidance."""
    if xi_t < 0.0:
        raise ValueError("xi_t must be >= 0")
    den = model.denoise(x_t, t)
    if xi_t == 0.0:
        return den.score
    grad, _ = _guidance(den, meas)
    return den.score - xi_t * grad


def langevin_explore(
    model: ScoreModel,
    meas: Measurement,
    x: np.ndarray,
    t: int,
    K: int,
    eta_t: float,
    xi_t: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """K unadjusted Langevin steps on the tilted target at level ``t``.

    Update: ``x <- x + eta_t * guided_score + sqrt(2 eta_t) w``. Each
    iteration draws the innovation ``w`` first, then evaluates the model
    once, so the rng stream and the NFE count are both exactly K deep.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if eta_t < 0.0 or xi_t < 0.0:
        raise ValueError("eta_t and xi_t must be >= 0")
    x = np.asarray(x, dtype=float)
    for k in range(K):
        w = rng.standard_normal(x.shape)
        den = model.denoise(x, t)
        drift = den.score
        if xi_t > 0.0:
            grad, _ = _guidance(den, meas)
            drift = drift - xi_t * grad
        x = x + eta_t * drift + np.sqrt(2.0 * eta_t) * w
        if not np.all(np.isfinite(x)):
            raise SamplerDiverged(f"non-finite state at level t={t}, langevin iteration {k}")
    return x


def _guided_plain_step(
    model, meas, x, level: int, dense_t: int, sub: NoiseSchedule, zeta: float, kind: str, rng
):
    """One ancestral (or deterministic) reverse step plus guidance subtraction."""
    den = model.denoise(x, dense_t)
    if kind == "ddpm":
        z = rng.standard_normal(x.shape)
        xp = ddpm_step(x, den.eps, level, z, sub)
    else:
        xp = ddim_step(x, den.eps, level, level - 1, 0.0, None, sub)
    grad, rnorm = _guidance(den, meas)
    x = xp - zeta * grad
    if not np.all(np.isfinite(x)):
        raise SamplerDiverged(f"non-finite state after guided step at level {level}")
    gnorm = np.linalg.norm(np.atleast_2d(grad), axis=-1)
    return x, float(np.mean(rnorm)), float(np.mean(gnorm))


def _ladder(model: ScoreModel, T: int) -> tuple[np.ndarray, NoiseSchedule]:
    times = subsample_times(model.schedule.T, T)
    return times, restrict_schedule(model.schedule, times)


def dps_sample(
    model: ScoreModel,
    meas: Measurement,
    cfg: DPSConfig,
    rng: np.random.Generator,
    n_chains: int = 1,
) -> SampleRun:
    """Guided ancestral sampling; one model evaluation per level."""
    counter = CountingModel(model)
    times, sub = _ladder(model, cfg.T)
    x = rng.standard_normal((n_chains, model.dim))
    trace = {"level": [], "residual": [], "guidance": []}
    for level in range(cfg.T, 0, -1):
        x, rmean, gmean = _guided_plain_step(
            counter, meas, x, level, int(times[level - 1]), sub, cfg.zeta, "ddpm", rng
        )
        trace["level"].append(level)
        trace["residual"].append(rmean)
        trace["guidance"].append(gmean)
    resid = np.linalg.norm(meas.y - meas.operator.apply(x), axis=-1)
    assert counter.nfe == nfe_of(cfg)
    return SampleRun(
        candidates=x[None],
        residuals=resid[None],
        best=np.zeros(n_chains, dtype=np.int64),
        nfe=counter.nfe,
        diagnostics=[trace],
    )


def dpmc_sample(
    model: ScoreModel,
    meas: Measurement,
    cfg: DPMCConfig,
    rng: np.random.Generator,
    n_chains: int = 1,
) -> SampleRun:
    """Annealed proposal/exploration sampling (best-of-``restarts``).

    Head and tail windows take guided plain steps; each middle level takes
    one unconditional deterministic proposal into the next level followed by
    K Langevin exploration steps there, with ``eta_level = eta * beta_level``
    and ``xi_level = xi * bar_alpha_level ** xi_exponent`` read off the
    subsampled ladder. Restarts run on independent child rng streams and the
    minimum-residual candidate is marked per chain.
    """
    times, sub = _ladder(model, cfg.T)
    head, mid, tail = window_counts(cfg.T, cfg.window)
    wz = cfg.xi if cfg.window_zeta is None else cfg.window_zeta
    streams = rng.spawn(cfg.restarts)

    all_x = np.empty((cfg.restarts, n_chains, model.dim))
    all_resid = np.empty((cfg.restarts, n_chains))
    diagnostics = []
    nfe = None
    for r, crng in enumerate(streams):
        counter = CountingModel(model)
        x = crng.standard_normal((n_chains, model.dim))
        trace = {"level": [], "residual": [], "guidance": []}
        for level in range(cfg.T, 0, -1):
            dense_t = int(times[level - 1])
            if level > cfg.T - head or level <= tail:
                x, rmean, gmean = _guided_plain_step(
                    counter, meas, x, level, dense_t, sub, wz, cfg.window_step, crng
                )
            else:
                den = counter.denoise(x, dense_t)
                x = ddim_step(x, den.eps, level, level - 1, 0.0, None, sub)
                lev = level - 1
                dense_prev = int(times[lev - 1]) if lev >= 1 else 0
                eta_l = cfg.eta * sub.beta(max(lev, 1))
                xi_l = cfg.xi * sub.bar_alpha(lev) ** cfg.xi_exponent
                x = langevin_explore(counter, meas, x, dense_prev, cfg.K, eta_l, xi_l, crng)
                rmean = float(np.mean(np.linalg.norm(meas.y - meas.operator.apply(x), axis=-1)))
                gmean = float("nan")
            trace["level"].append(level)
            trace["residual"].append(rmean)
            trace["guidance"].append(gmean)
        all_x[r] = x
        all_resid[r] = np.linalg.norm(meas.y - meas.operator.apply(x), axis=-1)
        diagnostics.append(trace)
        if nfe is None:
            nfe = counter.nfe
        assert counter.nfe == nfe == nfe_of(cfg)
    return SampleRun(
        candidates=all_x,
        residuals=all_resid,
        best=np.argmin(all_resid, axis=0),
        nfe=nfe,
        diagnostics=diagnostics,
    )


def unconditional_sample(
    model: ScoreModel,
    T: int,
    kind: str,
    rng: np.random.Generator,
    n_chains: int = 1,
) -> np.ndarray:
    """Plain reverse-diffusion sampling; returns clean-level states."""
    if kind not in ("ddpm", "ddim"):
        raise ValueError("kind must be 'ddpm' or 'ddim'")
    counter = CountingModel(model)
    times, sub = _ladder(model, T)
    x = rng.standard_normal((n_chains, model.dim))
    for level in range(T, 0, -1):
        den = counter.denoise(x, int(times[level - 1]))
        if kind == "ddpm":
            z = rng.standard_normal(x.shape)
            x = ddpm_step(x, den.eps, level, z, sub)
        else:
            x = ddim_step(x, den.eps, level, level - 1, 0.0, None, sub)
    assert counter.nfe == T
    return x[0] if n_chains == 1 else x
