"""Closed-form Bayesian inference for linear-Gaussian reward models over many actions.

Two prior families are supported:

* A hierarchical ("structured") prior in which every action parameter is drawn
  around a shared latent vector,

      psi ~ N(mu, Sigma)                      (latent, dimension d')
      theta_a | psi ~ N(W_a psi, Sigma_a)     (per action, dimension d)
      r | x, a ~ N(x^T theta_a, noise_sd^2)

  whose posterior factorizes through the latent and stays closed-form: the
  per-action posterior borrows strength from observations of *all* actions.

* The standard independent per-action Gaussian prior, obtained from the
  hierarchy by marginalizing the latent out.

All updates work on per-action sufficient statistics, so time is linear in the
number of actions and no joint (d*K)-dimensional covariance is ever formed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError, ShapeError
from .linalg import check_spd, quad_form, spd_inverse, spd_solve, symmetrize


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


def _readonly_int(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.int64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class StructuredPrior:
    """Parameters of the hierarchical linear-Gaussian prior.

    Attributes
    ----------
    latent_mean : (d',) mean of the latent vector.
    latent_cov : (d', d') covariance of the latent vector.
    mixing : (K, d, d') per-action mixing matrices W_a.
    action_covs : (K, d, d) per-action conditional covariances Sigma_a.
    noise_sd : reward noise standard deviation (> 0).
    """

    latent_mean: np.ndarray
    latent_cov: np.ndarray
    mixing: np.ndarray
    action_covs: np.ndarray
    noise_sd: float

    def __post_init__(self) -> None:
        mu = np.asarray(self.latent_mean, dtype=float)
        if mu.ndim != 1:
            raise ShapeError(f"latent_mean must be a vector, got shape {mu.shape}")
        d_latent = mu.shape[0]
        cov = check_spd(np.asarray(self.latent_cov, dtype=float), "latent_cov")
        if cov.shape != (d_latent, d_latent):
            raise ShapeError(f"latent_cov shape {cov.shape} mismatches latent dim {d_latent}")
        w = np.asarray(self.mixing, dtype=float)
        if w.ndim != 3 or w.shape[2] != d_latent:
            raise ShapeError(f"mixing must have shape (K, d, {d_latent}), got {w.shape}")
        k, d = w.shape[0], w.shape[1]
        ac = np.asarray(self.action_covs, dtype=float)
        if ac.shape != (k, d, d):
            raise ShapeError(f"action_covs must have shape ({k}, {d}, {d}), got {ac.shape}")
        if not np.all(np.isfinite(w)):
            raise DataError("mixing matrices contain non-finite entries")
        ac = np.stack([check_spd(ac[a], f"action_covs[{a}]") for a in range(k)])
        if not (self.noise_sd > 0):
            raise ParameterError(f"noise_sd must be > 0, got {self.noise_sd}")
        object.__setattr__(self, "latent_mean", _readonly(mu))
        object.__setattr__(self, "latent_cov", _readonly(cov))
        object.__setattr__(self, "mixing", _readonly(w))
        object.__setattr__(self, "action_covs", _readonly(ac))
        object.__setattr__(self, "noise_sd", float(self.noise_sd))

    @property
    def n_actions(self) -> int:
        return self.mixing.shape[0]

    @property
    def dim(self) -> int:
        return self.mixing.shape[1]

    @property
    def dim_latent(self) -> int:
        return self.mixing.shape[2]


@dataclass(frozen=True)
class NonStructuredPrior:
    """Independent Gaussian prior per action: theta_a ~ N(means[a], covs[a])."""

    means: np.ndarray
    covs: np.ndarray
    noise_sd: float

    def __post_init__(self) -> None:
        mu = np.asarray(self.means, dtype=float)
        if mu.ndim != 2:
            raise ShapeError(f"means must have shape (K, d), got {mu.shape}")
        k, d = mu.shape
        cov = np.asarray(self.covs, dtype=float)
        if cov.shape != (k, d, d):
            raise ShapeError(f"covs must have shape ({k}, {d}, {d}), got {cov.shape}")
        cov = np.stack([check_spd(cov[a], f"covs[{a}]") for a in range(k)])
        if not (self.noise_sd > 0):
            raise ParameterError(f"noise_sd must be > 0, got {self.noise_sd}")
        object.__setattr__(self, "means", _readonly(mu))
        object.__setattr__(self, "covs", _readonly(cov))
        object.__setattr__(self, "noise_sd", float(self.noise_sd))

    @property
    def n_actions(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class LoggedDataset:
    """Logged interactions (context, action, reward, logging propensity).

    Actions are integer ids in ``0..n_actions-1``. Propensities are the
    probability the logging policy put on the chosen action, in (0, 1].
    """

    contexts: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    propensities: np.ndarray
    n_actions: int

    def __post_init__(self) -> None:
        x = np.asarray(self.contexts, dtype=float)
        a = np.asarray(self.actions)
        r = np.asarray(self.rewards, dtype=float)
        p = np.asarray(self.propensities, dtype=float)
        if x.ndim != 2:
            raise ShapeError(f"contexts must have shape (n, d), got {x.shape}")
        n = x.shape[0]
        if a.shape != (n,) or r.shape != (n,) or p.shape != (n,):
            raise ShapeError(
                f"actions/rewards/propensities must all have length {n}, "
                f"got {a.shape}, {r.shape}, {p.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise DataError("contexts contain non-finite values")
        if not np.all(np.isfinite(r)):
            raise DataError("rewards contain non-finite values")
        if n > 0:
            if np.any(a < 0) or np.any(a >= self.n_actions):
                raise DataError(f"action ids must be in [0, {self.n_actions})")
            if np.any(p <= 0.0) or np.any(p > 1.0):
                raise DataError("propensities must be in (0, 1]")
        object.__setattr__(self, "contexts", _readonly(x))
        object.__setattr__(self, "actions", _readonly_int(a))
        object.__setattr__(self, "rewards", _readonly(r))
        object.__setattr__(self, "propensities", _readonly(p))

    @property
    def n(self) -> int:
        return self.contexts.shape[0]

    @property
    def dim(self) -> int:
        return self.contexts.shape[1]

    @classmethod
    def from_records(cls, records, n_actions: int, dim: int | None = None) -> "LoggedDataset":
        """Build a dataset from an iterable of (x, a, r, p0) tuples."""
        records = list(records)
        if records:
            x = np.stack([np.asarray(rec[0], dtype=float) for rec in records])
            a = np.array([rec[1] for rec in records])
            r = np.array([rec[2] for rec in records], dtype=float)
            p = np.array([rec[3] for rec in records], dtype=float)
        else:
            if dim is None:
                raise ShapeError("dim is required for an empty record list")
            x = np.zeros((0, dim))
            a = np.zeros(0, dtype=np.int64)
            r = np.zeros(0)
            p = np.ones(0)
        return cls(x, a, r, p, n_actions)

    def take(self, count: int) -> "LoggedDataset":
        """Return the dataset restricted to its first ``count`` records."""
        if count < 0 or count > self.n:
            raise ShapeError(f"count must be in [0, {self.n}], got {count}")
        return LoggedDataset(
            self.contexts[:count],
            self.actions[:count],
            self.rewards[:count],
            self.propensities[:count],
            self.n_actions,
        )


@dataclass(frozen=True)
class SufficientStats:
    """Per-action sufficient statistics of a logged dataset.

    grams[a] = noise_sd^-2 * sum_{i: a_i = a} x_i x_i^T
    moments[a] = noise_sd^-2 * sum_{i: a_i = a} r_i x_i
    counts[a] = number of records with action a
    """

    grams: np.ndarray
    moments: np.ndarray
    counts: np.ndarray

    @property
    def n_actions(self) -> int:
        return self.grams.shape[0]

    @property
    def dim(self) -> int:
        return self.grams.shape[1]


@dataclass(frozen=True)
class PosteriorState:
    """Full posterior under the structured prior.

    ``cond_covs[a]`` is the covariance of theta_a given the latent and data;
    ``latent_mean``/``latent_cov`` describe the latent posterior; ``means`` and
    ``covs`` are the marginal per-action posteriors used for reward estimates.
    """

    cond_covs: np.ndarray
    latent_mean: np.ndarray
    latent_cov: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    @property
    def n_actions(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class NonStructuredPosterior:
    """Per-action conjugate posterior under the independent prior."""

    means: np.ndarray
    covs: np.ndarray


def accumulate_stats(
    noise_sd: float, data: LoggedDataset, n_actions: int, dim: int
) -> SufficientStats:
    """Accumulate per-action precision-weighted sufficient statistics."""
    if not (noise_sd > 0):
        raise ParameterError(f"noise_sd must be > 0, got {noise_sd}")
    if data.n_actions != n_actions:
        raise ShapeError(f"dataset has {data.n_actions} actions, expected {n_actions}")
    if data.n > 0 and data.dim != dim:
        raise ShapeError(f"dataset contexts have dim {data.dim}, expected {dim}")
    inv_var = noise_sd ** -2
    grams = np.zeros((n_actions, dim, dim))
    moments = np.zeros((n_actions, dim))
    counts = np.zeros(n_actions, dtype=np.int64)
    for a in range(n_actions):
        mask = data.actions == a
        counts[a] = int(mask.sum())
        if counts[a] == 0:
            continue
        xa = data.contexts[mask]
        grams[a] = inv_var * (xa.T @ xa)
        moments[a] = inv_var * (data.rewards[mask] @ xa)
    return SufficientStats(_readonly(grams), _readonly(moments), _readonly_int(counts))


def _conditional_terms(prior: StructuredPrior, stats: SufficientStats):
    """Per-action prior precisions and conditional covariances.

    Returns (precisions, cond_covs) with precisions[a] = Sigma_a^-1 and
    cond_covs[a] = (Sigma_a^-1 + G_a)^-1.
    """
    if stats.n_actions != prior.n_actions or stats.dim != prior.dim:
        raise ShapeError(
            f"stats shape ({stats.n_actions}, {stats.dim}) mismatches prior "
            f"({prior.n_actions}, {prior.dim})"
        )
    k = prior.n_actions
    precisions = np.empty_like(prior.action_covs)
    cond_covs = np.empty_like(prior.action_covs)
    for a in range(k):
        precisions[a] = spd_inverse(prior.action_covs[a], f"action {a} prior covariance")
        cond_covs[a] = spd_inverse(precisions[a] + stats.grams[a], f"action {a} precision")
    return precisions, cond_covs


def latent_posterior(
    prior: StructuredPrior, stats: SufficientStats
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of the shared latent vector.

    The latent precision is the prior precision plus, for each action, the
    information the data carry about the latent through that action:
    W_a^T (Sigma_a^-1 - Sigma_a^-1 cond_cov_a Sigma_a^-1) W_a, computed in the
    algebraically equivalent form W_a^T (Sigma_a^-1 cond_cov_a G_a) W_a which
    vanishes exactly for unobserved actions.
    """
    precisions, cond_covs = _conditional_terms(prior, stats)
    prec = spd_inverse(prior.latent_cov, "latent prior covariance")
    rhs = prec @ prior.latent_mean
    for a in range(prior.n_actions):
        w = prior.mixing[a]
        gain = precisions[a] @ cond_covs[a]
        prec = prec + w.T @ symmetrize(gain @ stats.grams[a]) @ w
        rhs = rhs + w.T @ (gain @ stats.moments[a])
    latent_cov = spd_inverse(prec, "latent precision")
    latent_mean = spd_solve(prec, rhs, "latent precision")
    return latent_mean, latent_cov


def action_posteriors(
    prior: StructuredPrior,
    stats: SufficientStats,
    latent: tuple[np.ndarray, np.ndarray],
) -> PosteriorState:
    """Marginal per-action posteriors given the latent posterior."""
    latent_mean, latent_cov = latent
    precisions, cond_covs = _conditional_terms(prior, stats)
    k, d = prior.n_actions, prior.dim
    means = np.empty((k, d))
    covs = np.empty((k, d, d))
    for a in range(k):
        w = prior.mixing[a]
        transfer = cond_covs[a] @ precisions[a] @ w
        covs[a] = symmetrize(cond_covs[a] + transfer @ latent_cov @ transfer.T)
        means[a] = cond_covs[a] @ (precisions[a] @ (w @ latent_mean) + stats.moments[a])
    return PosteriorState(
        _readonly(cond_covs),
        _readonly(np.asarray(latent_mean, dtype=float)),
        _readonly(symmetrize(np.asarray(latent_cov, dtype=float))),
        _readonly(means),
        _readonly(covs),
    )


def fit_posterior(prior: StructuredPrior, data: LoggedDataset) -> PosteriorState:
    """Accumulate statistics and run the full structured update."""
    stats = accumulate_stats(prior.noise_sd, data, prior.n_actions, prior.dim)
    return action_posteriors(prior, stats, latent_posterior(prior, stats))


def nonstructured_posteriors(
    prior: NonStructuredPrior, stats: SufficientStats
) -> NonStructuredPosterior:
    """Standard conjugate update per action; unobserved actions keep the prior."""
    if stats.n_actions != prior.n_actions or stats.dim != prior.dim:
        raise ShapeError(
            f"stats shape ({stats.n_actions}, {stats.dim}) mismatches prior "
            f"({prior.n_actions}, {prior.dim})"
        )
    k, d = prior.n_actions, prior.dim
    means = np.empty((k, d))
    covs = np.empty((k, d, d))
    for a in range(k):
        if stats.counts[a] == 0:
            means[a] = prior.means[a]
            covs[a] = prior.covs[a]
            continue
        prec = spd_inverse(prior.covs[a], f"action {a} prior covariance")
        post_prec = prec + stats.grams[a]
        covs[a] = spd_inverse(post_prec, f"action {a} precision")
        means[a] = spd_solve(
            post_prec, prec @ prior.means[a] + stats.moments[a], f"action {a} precision"
        )
    return NonStructuredPosterior(_readonly(means), _readonly(covs))


def fit_nonstructured(prior: NonStructuredPrior, data: LoggedDataset) -> NonStructuredPosterior:
    stats = accumulate_stats(prior.noise_sd, data, prior.n_actions, prior.dim)
    return nonstructured_posteriors(prior, stats)


def marginalize_structured(prior: StructuredPrior) -> NonStructuredPrior:
    """Collapse the hierarchy into an independent prior per action.

    means[a] = W_a mu and covs[a] = Sigma_a + W_a Sigma W_a^T.
    """
    means = prior.mixing @ prior.latent_mean
    covs = np.stack(
        [
            symmetrize(prior.action_covs[a] + prior.mixing[a] @ prior.latent_cov @ prior.mixing[a].T)
            for a in range(prior.n_actions)
        ]
    )
    return NonStructuredPrior(means, covs, prior.noise_sd)


def reward_estimate(x: np.ndarray, a: int, post) -> float:
    """Posterior-mean reward estimate x^T means[a]."""
    return float(np.asarray(x, dtype=float) @ post.means[a])


def reward_uncertainty(x: np.ndarray, a: int, post) -> float:
    """Posterior variance of the reward estimate, x^T covs[a] x."""
    return quad_form(np.asarray(x, dtype=float), post.covs[a])
