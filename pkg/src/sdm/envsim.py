"""Synthetic environments: instances drawn from the prior, logged-data
generation under a logging policy, true values, and misspecification
perturbations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ParameterError, ShapeError
from .linalg import floor_eigenvalues, symmetrize
from .policies import GreedyPolicy, Policy, RewardModel
from .posterior import LoggedDataset, StructuredPrior

LINEAR = "linear_gaussian"
LOGISTIC = "bernoulli_logistic"
PERTURB_PD_FLOOR = 1e-6


class ContextDistribution:
    dim: int

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def exact_points(self) -> np.ndarray | None:
        """All support points when the distribution is a finite pool, else None."""
        return None


@dataclass(frozen=True)
class UniformCube(ContextDistribution):
    """Contexts uniform on [-1, 1]^dim."""

    dim: int

    def sample(self, n, rng):
        return rng.uniform(-1.0, 1.0, size=(n, self.dim))


@dataclass(frozen=True)
class FinitePool(ContextDistribution):
    """Uniform distribution over a fixed list of context vectors."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ShapeError(f"points must be a non-empty (m, d) array, got {pts.shape}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dim", pts.shape[1])

    def sample(self, n, rng):
        return self.points[rng.integers(0, self.points.shape[0], size=n)]

    def exact_points(self):
        return self.points


@dataclass(frozen=True)
class ScaledContexts(ContextDistribution):
    """A context distribution with every sample multiplied by ``factor``."""

    base: ContextDistribution
    factor: float

    def __post_init__(self):
        object.__setattr__(self, "dim", self.base.dim)

    def sample(self, n, rng):
        return self.factor * self.base.sample(n, rng)

    def exact_points(self):
        pts = self.base.exact_points()
        return None if pts is None else self.factor * pts


@dataclass(frozen=True)
class ProblemInstance:
    """A concrete environment: action parameters, reward family, context law."""

    theta: np.ndarray
    psi: np.ndarray
    reward_kind: str
    contexts: ContextDistribution

    def __post_init__(self):
        if self.reward_kind not in (LINEAR, LOGISTIC):
            raise ParameterError(f"unknown reward_kind {self.reward_kind!r}")
        if not np.all(np.isfinite(self.theta)):
            raise ShapeError("theta contains non-finite entries")

    @property
    def n_actions(self) -> int:
        return self.theta.shape[0]

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def reward_matrix(self, contexts: np.ndarray) -> np.ndarray:
        """Expected rewards, shape (len(contexts), n_actions)."""
        linear = np.asarray(contexts, dtype=float) @ self.theta.T
        return expit(linear) if self.reward_kind == LOGISTIC else linear

    def mean_reward(self, x: np.ndarray, a: int) -> float:
        val = float(np.asarray(x, dtype=float) @ self.theta[a])
        return float(expit(val)) if self.reward_kind == LOGISTIC else val


class TrueRewardModel(RewardModel):
    """Oracle scores straight from the instance's parameters."""

    def __init__(self, instance: ProblemInstance):
        self.instance = instance

    def scores(self, x):
        return self.instance.reward_matrix(np.asarray(x)[None, :])[0]

    def scores_batch(self, contexts):
        return self.instance.reward_matrix(contexts)


def optimal_policy(instance: ProblemInstance) -> GreedyPolicy:
    return GreedyPolicy(TrueRewardModel(instance), instance.n_actions)


def optimal_action(instance: ProblemInstance, x: np.ndarray) -> int:
    """Best action for context ``x`` under the true parameters (lowest id on ties)."""
    return int(np.argmax(instance.reward_matrix(np.asarray(x, dtype=float)[None, :])[0]))


def sample_instance(
    prior: StructuredPrior,
    reward_kind: str,
    rng: np.random.Generator,
    contexts: ContextDistribution | None = None,
) -> ProblemInstance:
    """Draw (psi, theta) hierarchically from the structured prior."""
    chol_latent = np.linalg.cholesky(prior.latent_cov)
    psi = prior.latent_mean + chol_latent @ rng.standard_normal(prior.dim_latent)
    theta = np.empty((prior.n_actions, prior.dim))
    for a in range(prior.n_actions):
        chol = np.linalg.cholesky(prior.action_covs[a])
        theta[a] = prior.mixing[a] @ psi + chol @ rng.standard_normal(prior.dim)
    if contexts is None:
        contexts = UniformCube(prior.dim)
    return ProblemInstance(theta, psi, reward_kind, contexts)


def generate_log(
    instance: ProblemInstance,
    logging_policy: Policy,
    n: int,
    noise_sd: float,
    rng: np.random.Generator,
    feature_map=None,
) -> LoggedDataset:
    """Simulate ``n`` logged interactions under ``logging_policy``.

    Stored propensities come from the same per-context probability vector used
    to draw the action, so they agree exactly with ``policy.propensity``.
    """
    if n < 0:
        raise ParameterError(f"n must be >= 0, got {n}")
    if noise_sd < 0:
        raise ParameterError(f"noise_sd must be >= 0, got {noise_sd}")
    raw = instance.contexts.sample(n, rng)
    contexts = np.asarray(feature_map(raw), dtype=float) if feature_map is not None else raw
    if contexts.shape != (n, instance.dim):
        raise ShapeError(
            f"feature map must produce shape ({n}, {instance.dim}), got {contexts.shape}"
        )
    k = instance.n_actions
    actions = np.empty(n, dtype=np.int64)
    propensities = np.empty(n)
    for i in range(n):
        probs = logging_policy.probs(contexts[i])
        actions[i] = int(rng.choice(k, p=probs / probs.sum()))
        propensities[i] = probs[actions[i]]
    means = np.einsum("ij,ij->i", contexts, instance.theta[actions]) if n else np.zeros(0)
    if instance.reward_kind == LOGISTIC:
        rewards = (rng.random(n) < expit(means)).astype(float)
    else:
        rewards = means + noise_sd * rng.standard_normal(n) if noise_sd > 0 else means
    return LoggedDataset(contexts, actions, rewards, propensities, k)


def true_value(
    instance: ProblemInstance,
    policy: Policy,
    n_mc: int,
    rng: np.random.Generator | None = None,
) -> float:
    """Value of ``policy``: exact over a finite pool, Monte Carlo otherwise."""
    pool = instance.contexts.exact_points()
    if pool is not None:
        contexts = pool
    else:
        if rng is None:
            raise ParameterError("rng is required for Monte Carlo value estimation")
        contexts = instance.contexts.sample(n_mc, rng)
    rewards = instance.reward_matrix(contexts)
    return float((policy.probs_batch(contexts) * rewards).sum(axis=1).mean())


def perturb_prior(
    prior: StructuredPrior,
    level: float,
    rng: np.random.Generator,
    width: float = 0.5,
) -> StructuredPrior:
    """Add independent Uniform[level, level + width] noise to every prior entry.

    Covariances are re-symmetrized and eigenvalue-floored so the perturbed
    prior stays valid. ``width`` exists as a test hook; width 0 with level 0
    leaves the prior unchanged.
    """
    if width < 0:
        raise ParameterError(f"width must be >= 0, got {width}")

    def noise(shape):
        return rng.uniform(level, level + width, size=shape)

    def repair(cov):
        return floor_eigenvalues(symmetrize(cov), PERTURB_PD_FLOOR)

    return StructuredPrior(
        latent_mean=prior.latent_mean + noise(prior.latent_mean.shape),
        latent_cov=repair(prior.latent_cov + noise(prior.latent_cov.shape)),
        mixing=prior.mixing + noise(prior.mixing.shape),
        action_covs=np.stack(
            [repair(prior.action_covs[a] + noise(prior.action_covs[a].shape))
             for a in range(prior.n_actions)]
        ),
        noise_sd=prior.noise_sd,
    )


def make_synthetic_prior(
    dim: int = 10,
    dim_latent: int = 10,
    n_actions: int = 100,
    noise_sd: float = 1.0,
    rng: np.random.Generator | None = None,
) -> StructuredPrior:
    """Default synthetic hierarchy: latent N(mu, 3I) with mu ~ U[-1,1]^d',
    mixing matrices uniform on [-1, 1], unit per-action covariances."""
    rng = np.random.default_rng(0) if rng is None else rng
    return StructuredPrior(
        latent_mean=rng.uniform(-1.0, 1.0, size=dim_latent),
        latent_cov=3.0 * np.eye(dim_latent),
        mixing=rng.uniform(-1.0, 1.0, size=(n_actions, dim, dim_latent)),
        action_covs=np.broadcast_to(np.eye(dim), (n_actions, dim, dim)).copy(),
        noise_sd=noise_sd,
    )


def make_isotropic_prior(
    dim: int,
    n_actions: int,
    latent_sd: float,
    action_sd: float,
    noise_sd: float,
    rng: np.random.Generator,
) -> StructuredPrior:
    """Prior with isotropic covariances and orthogonal mixing matrices.

    Built for bound evaluation: every W_a W_a^T has all eigenvalues equal to 1.
    """
    mixing = np.empty((n_actions, dim, dim))
    for a in range(n_actions):
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        mixing[a] = q * np.sign(np.diag(r))
    return StructuredPrior(
        latent_mean=rng.uniform(-1.0, 1.0, size=dim),
        latent_cov=latent_sd ** 2 * np.eye(dim),
        mixing=mixing,
        action_covs=np.broadcast_to(action_sd ** 2 * np.eye(dim), (n_actions, dim, dim)).copy(),
        noise_sd=noise_sd,
    )
