"""Prior score models.

A score model exposes four views of the same quantity at a noise level t:
the noise prediction ``eps``, the score, the denoised mean ``x0hat`` and the
vector-Jacobian product of ``x0hat`` with respect to the state. Samplers
consume :meth:`denoise`, which bundles all four per forward evaluation so
that one call is exactly one network-function evaluation (NFE).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from .diffusion import NoiseSchedule
from .gmm import GaussianMixture, gmm_marginal_params, gmm_score, gmm_score_hessian_action


@dataclass
class Denoised:
    """One model evaluation at (x, t): all derived views plus a VJP closure."""

    x: np.ndarray
    t: int
    eps: np.ndarray
    score: np.ndarray
    x0hat: np.ndarray
    vjp: Callable[[np.ndarray], np.ndarray]


@runtime_checkable
class ScoreModel(Protocol):
    dim: int
    schedule: NoiseSchedule

    def eps(self, x: np.ndarray, t: int) -> np.ndarray: ...

    def score(self, x: np.ndarray, t: int) -> np.ndarray: ...

    def x0hat(self, x: np.ndarray, t: int) -> np.ndarray: ...

    def x0hat_vjp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray: ...

    def denoise(self, x: np.ndarray, t: int) -> Denoised: ...


class GMMScoreModel:
    """Exact score model for a Gaussian-mixture prior.

    Everything is closed form: the noised marginal is again a mixture, its
    score and Hessian are analytic, and the x0hat Jacobian is
    ``(I + (1 - ab_t) H(x)) / sqrt(ab_t)``. Valid at every t >= 0, including
    the clean level where the score is the prior score.
    """

    def __init__(self, prior: GaussianMixture, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule
        self.dim = prior.dim

    def _marginal(self, t: int) -> GaussianMixture:
        return gmm_marginal_params(self.prior, t, self.schedule)

    def score(self, x: np.ndarray, t: int) -> np.ndarray:
        return gmm_score(self._marginal(t), x)

    def eps(self, x: np.ndarray, t: int) -> np.ndarray:
        ab = self.schedule.bar_alpha(t)
        return -np.sqrt(1.0 - ab) * self.score(x, t)

    def x0hat(self, x: np.ndarray, t: int) -> np.ndarray:
        ab = self.schedule.bar_alpha(t)
        x = np.asarray(x, dtype=float)
        return (x + (1.0 - ab) * self.score(x, t)) / np.sqrt(ab)

    def x0hat_vjp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        ab = self.schedule.bar_alpha(t)
        _, hv = gmm_score_hessian_action(self._marginal(t), x, v)
        return (np.asarray(v, dtype=float) + (1.0 - ab) * hv) / np.sqrt(ab)

    def denoise(self, x: np.ndarray, t: int) -> Denoised:
        x = np.asarray(x, dtype=float)
        ab = self.schedule.bar_alpha(t)
        marg = self._marginal(t)
        score = gmm_score(marg, x)
        eps = -np.sqrt(1.0 - ab) * score
        x0 = (x + (1.0 - ab) * score) / np.sqrt(ab)

        def vjp(v: np.ndarray) -> np.ndarray:
            _, hv = gmm_score_hessian_action(marg, x, v)
            return (np.asarray(v, dtype=float) + (1.0 - ab) * hv) / np.sqrt(ab)

        return Denoised(x=x, t=t, eps=eps, score=score, x0hat=x0, vjp=vjp)


@dataclass
class CountingModel:
    """Wrapper that counts forward evaluations at the model boundary."""

    inner: ScoreModel
    nfe: int = 0

    def __post_init__(self):
        self.dim = self.inner.dim
        self.schedule = self.inner.schedule

    def denoise(self, x: np.ndarray, t: int) -> Denoised:
        self.nfe += 1
        return self.inner.denoise(x, t)

    def eps(self, x: np.ndarray, t: int) -> np.ndarray:
        return self.denoise(x, t).eps

    def score(self, x: np.ndarray, t: int) -> np.ndarray:
        return self.denoise(x, t).score

    def x0hat(self, x: np.ndarray, t: int) -> np.ndarray:
        return self.denoise(x, t).x0hat

    def x0hat_vjp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        return self.denoise(x, t).vjp(v)
