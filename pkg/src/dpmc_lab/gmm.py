"""Gaussian mixtures with closed-form densities, scores and Hessians.

These mixtures serve double duty: as verifiable priors for the samplers and
as exact posterior representations in the oracle module. All responsibility
computations happen in log space with max subtraction so far-tail probes
degrade gracefully instead of producing NaNs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .diffusion import NoiseSchedule

# exp() underflows to 0 below roughly -745; clamp keeps responsibilities finite
_LOG_FLOOR = -745.0


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of M Gaussians in R^D: weights (M,), means (M, D), covs (M, D, D)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        cov = np.asarray(self.covs, dtype=float)
        if mu.ndim != 2:
            raise ValueError("means must be (M, D)")
        M, D = mu.shape
        if w.shape != (M,) or cov.shape != (M, D, D):
            raise ValueError("weights must be (M,), covs must be (M, D, D)")
        if np.any(w <= 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1 within 1e-12")
        for k in range(M):
            try:
                np.linalg.cholesky(cov[k])
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"covariance {k} is not SPD") from exc
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def gmm_marginal_params(prior: GaussianMixture, t: int, schedule: NoiseSchedule) -> GaussianMixture:
    """Push the mixture through the forward noising to level ``t``.

    Component k becomes N(sqrt(ab_t) mu_k, ab_t Sigma_k + (1 - ab_t) I); the
    weights are unchanged and ``t = 0`` returns the prior exactly.
    """
    ab = schedule.bar_alpha(t)
    if ab == 1.0:
        return prior
    eye = np.eye(prior.dim)
    covs = ab * prior.covs + (1.0 - ab) * eye[None, :, :]
    return GaussianMixture(prior.weights, np.sqrt(ab) * prior.means, covs)


def _component_logpdfs(gmm: GaussianMixture, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-component log densities and whitened residuals.

    Returns ``(logp, white)`` with ``logp`` shaped (..., M) and ``white``
    shaped (..., M, D) holding ``L_k^{-1}(x - mu_k)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    M, D = gmm.n_components, gmm.dim
    logp = np.empty(x.shape[:-1] + (M,))
    white = np.empty(x.shape[:-1] + (M, D))
    for k in range(M):
        L = np.linalg.cholesky(gmm.covs[k])
        diff = x - gmm.means[k]
        wk = solve_triangular(L, diff.reshape(-1, D).T, lower=True).T.reshape(diff.shape)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        logp[..., k] = -0.5 * (np.sum(wk * wk, axis=-1) + logdet + D * np.log(2.0 * np.pi))
        white[..., k, :] = wk
    return logp, white


def gmm_log_density(gmm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """Log mixture density, stabilized with max subtraction."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    logp, _ = _component_logpdfs(gmm, x)
    lw = np.log(gmm.weights)
    joint = logp + lw
    m = np.max(joint, axis=-1, keepdims=True)
    out = (m + np.log(np.sum(np.exp(joint - m), axis=-1, keepdims=True)))[..., 0]
    return out[0] if squeeze else out


def _responsibilities(gmm: GaussianMixture, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior component probabilities r_k(x) plus the whitened residuals."""
    logp, white = _component_logpdfs(gmm, x)
    joint = logp + np.log(gmm.weights)
    m = np.max(joint, axis=-1, keepdims=True)
    r = np.exp(np.maximum(joint - m, _LOG_FLOOR))
    r /= np.sum(r, axis=-1, keepdims=True)
    return r, white


def gmm_score(gmm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """Gradient of the log mixture density at ``x`` (broadcasts over rows)."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    xb = np.atleast_2d(x)
    r, white = _responsibilities(gmm, xb)
    M, D = gmm.n_components, gmm.dim
    score = np.zeros_like(xb)
    for k in range(M):
        L = np.linalg.cholesky(gmm.covs[k])
        # component score -Sigma_k^{-1}(x - mu_k) = -L^{-T} white_k
        gk = -solve_triangular(L, white[..., k, :].reshape(-1, D).T, lower=True, trans="T").T
        score += r[..., k : k + 1] * gk.reshape(xb.shape)
    return score[0] if squeeze else score.reshape(x.shape)


def gmm_score_hessian_action(
    gmm: GaussianMixture, x: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Score s(x) and Hessian-vector product H(x) v of the log density.

    Uses the closed form H = sum_k r_k (g_k g_k^T - Sigma_k^{-1}) - s s^T,
    where g_k are the component scores, so only matrix-vector work is done.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    squeeze = x.ndim == 1
    xb, vb = np.atleast_2d(x), np.atleast_2d(v)
    if vb.shape != xb.shape:
        raise ValueError("v must match x in shape")
    r, white = _responsibilities(gmm, xb)
    M, D = gmm.n_components, gmm.dim
    score = np.zeros_like(xb)
    hv = np.zeros_like(xb)
    for k in range(M):
        L = np.linalg.cholesky(gmm.covs[k])
        gk = -solve_triangular(L, white[..., k, :].reshape(-1, D).T, lower=True, trans="T").T
        gk = gk.reshape(xb.shape)
        rk = r[..., k : k + 1]
        score += rk * gk
        lam_v = cho_solve((L, True), vb.reshape(-1, D).T).T.reshape(vb.shape)
        hv += rk * (gk * np.sum(gk * vb, axis=-1, keepdims=True) - lam_v)
    hv -= score * np.sum(score * vb, axis=-1, keepdims=True)
    if squeeze:
        return score[0], hv[0]
    return score.reshape(x.shape), hv.reshape(x.shape)


def gmm_moments(gmm: GaussianMixture) -> tuple[np.ndarray, np.ndarray]:
    """Exact mixture mean and covariance."""
    w = gmm.weights
    mean = w @ gmm.means
    cov = np.einsum("k,kij->ij", w, gmm.covs)
    cov += np.einsum("k,ki,kj->ij", w, gmm.means, gmm.means)
    cov -= np.outer(mean, mean)
    return mean, cov


def sample_gmm(gmm: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` points: categorical component choice, then Cholesky transform."""
    if n < 1:
        raise ValueError("n must be >= 1")
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    z = rng.standard_normal((n, gmm.dim))
    out = np.empty((n, gmm.dim))
    for k in range(gmm.n_components):
        sel = comp == k
        if not np.any(sel):
            continue
        L = np.linalg.cholesky(gmm.covs[k])
        out[sel] = gmm.means[k] + z[sel] @ L.T
    return out


def gmm_posterior_mean_x0(
    prior: GaussianMixture, x_t: np.ndarray, t: int, schedule: NoiseSchedule
) -> np.ndarray:
    """E[x0 | x_t] from per-component joint-Gaussian conjugacy.

    Independent of the Tweedie route: component k contributes
    mu_k + sqrt(ab) Sigma_k (ab Sigma_k + (1-ab) I)^{-1} (x_t - sqrt(ab) mu_k),
    weighted by the noised-marginal responsibilities.
    """
    ab = schedule.bar_alpha(t)
    noised = gmm_marginal_params(prior, t, schedule)
    x_t = np.asarray(x_t, dtype=float)
    squeeze = x_t.ndim == 1
    xb = np.atleast_2d(x_t)
    r, _ = _responsibilities(noised, xb)
    out = np.zeros_like(xb)
    for k in range(prior.n_components):
        cf = cho_factor(noised.covs[k])
        diff = xb - np.sqrt(ab) * prior.means[k]
        gain = np.sqrt(ab) * prior.covs[k]
        cond_mean = prior.means[k] + (gain @ cho_solve(cf, diff.T)).T
        out += r[..., k : k + 1] * cond_mean
    return out[0] if squeeze else out
