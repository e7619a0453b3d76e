"""Binary-reward support via a Gaussian approximation of the logistic likelihood.

Per-action Bernoulli-logistic likelihoods are replaced by Gaussians centered at
the (ridge-regularized) MLE with the likelihood curvature as precision. The
resulting statistics slot directly into the structured posterior update in
place of the linear-Gaussian sufficient statistics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DataError, ParameterError
from .linalg import quad_form
from .posterior import (
    LoggedDataset,
    NonStructuredPosterior,
    NonStructuredPrior,
    PosteriorState,
    StructuredPrior,
    SufficientStats,
    action_posteriors,
    latent_posterior,
    nonstructured_posteriors,
)

DEFAULT_RIDGE = 1e-4
GRAD_TOL = 1e-8
MAX_NEWTON_ITERS = 100
MAX_HALVINGS = 30


@dataclass(frozen=True)
class LogisticStats:
    """Per-action MLE vectors, likelihood curvatures, and convergence flags."""

    mle_means: np.ndarray
    curvatures: np.ndarray
    converged: np.ndarray
    counts: np.ndarray

    @property
    def n_actions(self) -> int:
        return self.mle_means.shape[0]


def _penalized_loglik(theta: np.ndarray, x: np.ndarray, r: np.ndarray, ridge: float) -> float:
    logits = x @ theta
    # log g(z) = -log(1 + exp(-z)), computed stably via logaddexp.
    ll = -(np.logaddexp(0.0, -logits) @ r) - (np.logaddexp(0.0, logits) @ (1.0 - r))
    return float(ll - 0.5 * ridge * theta @ theta)


def loglik_gradient(theta: np.ndarray, x: np.ndarray, r: np.ndarray, ridge: float) -> np.ndarray:
    """Gradient of the ridge-penalized Bernoulli log-likelihood."""
    return x.T @ (r - expit(x @ theta)) - ridge * theta


def logistic_mle(
    contexts: np.ndarray,
    rewards: np.ndarray,
    ridge: float = DEFAULT_RIDGE,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Newton fit of one action's logistic MLE.

    Returns (mle, curvature, converged). The curvature is the unpenalized
    likelihood Hessian sum_i dg(x_i^T mle) x_i x_i^T, which may be singular;
    it is never inverted downstream. Step halving keeps the penalized
    log-likelihood non-decreasing.
    """
    if not (ridge > 0):
        raise ParameterError(f"ridge must be > 0, got {ridge}")
    x = np.asarray(contexts, dtype=float)
    r = np.asarray(rewards, dtype=float)
    if x.ndim != 2 or r.shape != (x.shape[0],):
        raise DataError(f"expected contexts (m, d) and rewards (m,), got {x.shape}, {r.shape}")
    if not np.all((r == 0.0) | (r == 1.0)):
        raise DataError("logistic rewards must be binary (0 or 1)")
    d = x.shape[1]
    theta = np.zeros(d)
    converged = True
    if x.shape[0] > 0:
        converged = False
        obj = _penalized_loglik(theta, x, r, ridge)
        for _ in range(MAX_NEWTON_ITERS):
            grad = loglik_gradient(theta, x, r, ridge)
            if np.max(np.abs(grad)) <= GRAD_TOL:
                converged = True
                break
            slopes = expit(x @ theta)
            weights = slopes * (1.0 - slopes)
            hess = x.T @ (weights[:, None] * x) + ridge * np.eye(d)
            step = np.linalg.solve(hess, grad)
            size = 1.0
            for _ in range(MAX_HALVINGS):
                cand = theta + size * step
                cand_obj = _penalized_loglik(cand, x, r, ridge)
                if cand_obj >= obj:
                    break
                size *= 0.5
            theta = theta + size * step
            obj = _penalized_loglik(theta, x, r, ridge)
        else:
            converged = np.max(np.abs(loglik_gradient(theta, x, r, ridge))) <= GRAD_TOL
    slopes = expit(x @ theta)
    weights = slopes * (1.0 - slopes)
    curvature = x.T @ (weights[:, None] * x) if x.shape[0] > 0 else np.zeros((d, d))
    return theta, (curvature + curvature.T) / 2.0, bool(converged)


def fit_logistic_stats(data: LoggedDataset, ridge: float = DEFAULT_RIDGE) -> LogisticStats:
    """Run the per-action Newton fits over a logged dataset."""
    k, d = data.n_actions, data.dim
    means = np.zeros((k, d))
    curvatures = np.zeros((k, d, d))
    converged = np.ones(k, dtype=bool)
    counts = np.zeros(k, dtype=np.int64)
    for a in range(k):
        mask = data.actions == a
        counts[a] = int(mask.sum())
        means[a], curvatures[a], converged[a] = logistic_mle(
            data.contexts[mask], data.rewards[mask], ridge
        )
    return LogisticStats(means, curvatures, converged, counts)


def _as_sufficient_stats(lstats: LogisticStats) -> SufficientStats:
    moments = np.einsum("aij,aj->ai", lstats.curvatures, lstats.mle_means)
    return SufficientStats(lstats.curvatures, moments, lstats.counts)


def structured_update_logistic(prior: StructuredPrior, lstats: LogisticStats) -> PosteriorState:
    """Structured posterior with the Gaussian-approximated logistic likelihood."""
    stats = _as_sufficient_stats(lstats)
    return action_posteriors(prior, stats, latent_posterior(prior, stats))


def nonstructured_update_logistic(
    prior: NonStructuredPrior, lstats: LogisticStats
) -> NonStructuredPosterior:
    """Independent-prior counterpart of the logistic update."""
    return nonstructured_posteriors(prior, _as_sufficient_stats(lstats))


def logistic_reward_estimate(x: np.ndarray, a: int, post, form: str = "variance") -> float:
    """Mean of the sigmoid reward under the Gaussian posterior of action ``a``.

    The "variance" form scales the posterior mean by sqrt(1 + pi/8 * x^T C x)
    (the predictive-variance correction, the default); the "norm" form puts
    the non-squared norm sqrt(x^T C x) inside the correction instead. Output
    is strictly inside (0, 1).
    """
    x = np.asarray(x, dtype=float)
    mean = float(x @ post.means[a])
    spread = quad_form(x, post.covs[a])
    if form == "variance":
        correction = spread
    elif form == "norm":
        correction = math.sqrt(max(spread, 0.0))
    else:
        raise ParameterError(f"form must be 'variance' or 'norm', got {form!r}")
    return float(expit(mean / math.sqrt(1.0 + math.pi / 8.0 * correction)))
