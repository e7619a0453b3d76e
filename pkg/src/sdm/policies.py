"""Policy representations and decision rules.

A policy maps a context to a probability distribution over the action set.
Deterministic rules (greedy, pessimistic) are represented as one-hot
distributions so that propensities are exact everywhere. Ties always break
toward the lowest action id for reproducibility.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .logistic import logistic_reward_estimate


def alpha_radius(d: int, delta: float) -> float:
    """Confidence radius sqrt(d + 2 sqrt(d log(1/delta)) + 2 log(1/delta)).

    Decreasing in delta with limit sqrt(d) as delta -> 1.
    """
    if d < 1:
        raise ParameterError(f"d must be >= 1, got {d}")
    if not (0.0 < delta <= 1.0):
        raise ParameterError(f"delta must be in (0, 1], got {delta}")
    log_term = math.log(1.0 / delta)
    return math.sqrt(d + 2.0 * math.sqrt(d * log_term) + 2.0 * log_term)


class RewardModel:
    """Scores every action for a context; basis for greedy-style policies."""

    def scores(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def scores_batch(self, contexts: np.ndarray) -> np.ndarray:
        return np.stack([self.scores(x) for x in contexts])


@dataclass(frozen=True)
class LinearRewardModel(RewardModel):
    """r_hat(x, a) = x^T means[a] for a (K, d) coefficient matrix."""

    means: np.ndarray

    def scores(self, x):
        return self.means @ np.asarray(x, dtype=float)

    def scores_batch(self, contexts):
        return np.asarray(contexts, dtype=float) @ self.means.T

    @property
    def n_actions(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class LogisticRewardModel(RewardModel):
    """Sigmoid-mean reward estimates from a Gaussian posterior."""

    post: object
    form: str = "variance"

    def scores(self, x):
        k = self.post.means.shape[0]
        return np.array([logistic_reward_estimate(x, a, self.post, self.form) for a in range(k)])

    def scores_batch(self, contexts):
        contexts = np.asarray(contexts, dtype=float)
        mean = contexts @ self.post.means.T
        spread = np.einsum("ni,aij,nj->na", contexts, self.post.covs, contexts)
        if self.form == "norm":
            spread = np.sqrt(np.maximum(spread, 0.0))
        scale = np.sqrt(1.0 + math.pi / 8.0 * spread)
        return 1.0 / (1.0 + np.exp(-mean / scale))

    @property
    def n_actions(self) -> int:
        return self.post.means.shape[0]


def greedy_action(x: np.ndarray, model: RewardModel) -> int:
    """Index of the highest-scoring action (lowest id on ties)."""
    return int(np.argmax(model.scores(x)))


def pessimistic_action(x: np.ndarray, post, delta: float) -> int:
    """Argmax of score minus the confidence-radius uncertainty penalty."""
    x = np.asarray(x, dtype=float)
    radius = alpha_radius(post.means.shape[1], delta)
    means = post.means @ x
    widths = np.sqrt(np.maximum(np.einsum("aij,i,j->a", post.covs, x, x), 0.0))
    return int(np.argmax(means - radius * widths))


class Policy:
    """Base class: a distribution over ``n_actions`` for each context."""

    n_actions: int

    def probs(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def probs_batch(self, contexts: np.ndarray) -> np.ndarray:
        return np.stack([self.probs(x) for x in contexts])

    def propensity(self, x: np.ndarray, a: int) -> float:
        return float(self.probs(x)[a])

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> int:
        p = self.probs(x)
        return int(rng.choice(self.n_actions, p=p / p.sum()))

    def sample_batch(self, contexts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        probs = self.probs_batch(contexts)
        cumulative = np.cumsum(probs, axis=1)
        cumulative /= cumulative[:, -1:]
        draws = rng.random(contexts.shape[0])
        return (draws[:, None] > cumulative).sum(axis=1).astype(np.int64)


def _one_hot(index: np.ndarray | int, k: int) -> np.ndarray:
    if np.ndim(index) == 0:
        out = np.zeros(k)
        out[int(index)] = 1.0
        return out
    out = np.zeros((len(index), k))
    out[np.arange(len(index)), index] = 1.0
    return out


@dataclass(frozen=True)
class UniformPolicy(Policy):
    n_actions: int

    def probs(self, x):
        return np.full(self.n_actions, 1.0 / self.n_actions)

    def probs_batch(self, contexts):
        return np.full((len(contexts), self.n_actions), 1.0 / self.n_actions)


@dataclass(frozen=True)
class GreedyPolicy(Policy):
    model: RewardModel
    n_actions: int

    def probs(self, x):
        return _one_hot(greedy_action(x, self.model), self.n_actions)

    def probs_batch(self, contexts):
        return _one_hot(np.argmax(self.model.scores_batch(contexts), axis=1), self.n_actions)


@dataclass(frozen=True)
class PessimisticPolicy(Policy):
    """Greedy on score minus alpha_radius(d, delta)-scaled posterior width."""

    post: object
    delta: float

    def __post_init__(self):
        if not (0.0 < self.delta < 1.0):
            raise ParameterError(f"delta must be in (0, 1), got {self.delta}")
        object.__setattr__(self, "n_actions", self.post.means.shape[0])

    def probs(self, x):
        return _one_hot(pessimistic_action(x, self.post, self.delta), self.n_actions)

    def probs_batch(self, contexts):
        contexts = np.asarray(contexts, dtype=float)
        radius = alpha_radius(self.post.means.shape[1], self.delta)
        means = contexts @ self.post.means.T
        widths = np.sqrt(
            np.maximum(np.einsum("ni,aij,nj->na", contexts, self.post.covs, contexts), 0.0)
        )
        return _one_hot(np.argmax(means - radius * widths, axis=1), self.n_actions)


@dataclass(frozen=True)
class EpsilonGreedyPolicy(Policy):
    """Greedy arm with mass (1 - epsilon) + epsilon/K, every other arm epsilon/K."""

    model: RewardModel
    epsilon: float
    n_actions: int

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 1.0):
            raise ParameterError(f"epsilon must be in [0, 1], got {self.epsilon}")

    def probs(self, x):
        out = np.full(self.n_actions, self.epsilon / self.n_actions)
        out[greedy_action(x, self.model)] += 1.0 - self.epsilon
        return out

    def probs_batch(self, contexts):
        out = np.full((len(contexts), self.n_actions), self.epsilon / self.n_actions)
        best = np.argmax(self.model.scores_batch(contexts), axis=1)
        out[np.arange(len(contexts)), best] += 1.0 - self.epsilon
        return out


@dataclass(frozen=True)
class SoftmaxPolicy(Policy):
    """pi(a | x) proportional to exp(x^T params[a] / temperature)."""

    params: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        if not (self.temperature > 0):
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        params = np.ascontiguousarray(self.params, dtype=float)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "n_actions", params.shape[0])

    def probs(self, x):
        logits = (self.params @ np.asarray(x, dtype=float)) / self.temperature
        logits -= logits.max()
        weights = np.exp(logits)
        return weights / weights.sum()

    def probs_batch(self, contexts):
        logits = (np.asarray(contexts, dtype=float) @ self.params.T) / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        return weights / weights.sum(axis=1, keepdims=True)


def sample_action(policy: Policy, x: np.ndarray, rng: np.random.Generator) -> int:
    """Draw one action from the policy's distribution at ``x``."""
    return policy.sample(x, rng)


def propensity(policy: Policy, x: np.ndarray, a: int) -> float:
    """Exact probability mass the policy puts on action ``a`` at ``x``."""
    return policy.propensity(x, a)
