"""Learning methods: callables mapping logged data to a policy.

Every learner is invoked as ``learner(data, instance)``. The environment
instance is supplied so oracle baselines can be expressed inside the same
Monte Carlo loops; ordinary learners ignore it. All learners are plain
picklable objects so replications can run in worker processes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .envsim import ProblemInstance, optimal_policy
from .estimators import ActionStructure, dm_freq_model, opl_optimize
from .logistic import (
    fit_logistic_stats,
    nonstructured_update_logistic,
    structured_update_logistic,
)
from .policies import (
    EpsilonGreedyPolicy,
    GreedyPolicy,
    LinearRewardModel,
    LogisticRewardModel,
    PessimisticPolicy,
    Policy,
    RewardModel,
    SoftmaxPolicy,
    UniformPolicy,
)
from .posterior import (
    LoggedDataset,
    StructuredPrior,
    fit_nonstructured,
    fit_posterior,
    marginalize_structured,
)


@dataclass(frozen=True)
class SigmoidPointModel(RewardModel):
    """Plug-in sigmoid scores from per-action point estimates."""

    means: np.ndarray

    def scores(self, x):
        return expit(self.means @ np.asarray(x, dtype=float))

    def scores_batch(self, contexts):
        return expit(np.asarray(contexts, dtype=float) @ self.means.T)


@dataclass(frozen=True)
class StructuredGreedyLearner:
    """Greedy policy on the structured posterior's mean rewards."""

    prior: StructuredPrior

    def __call__(self, data: LoggedDataset, instance=None) -> Policy:
        post = fit_posterior(self.prior, data)
        return GreedyPolicy(LinearRewardModel(post.means), self.prior.n_actions)

    def reward_model(self, data: LoggedDataset) -> RewardModel:
        return LinearRewardModel(fit_posterior(self.prior, data).means)


@dataclass(frozen=True)
class StructuredPessimisticLearner:
    """Pessimistic policy on the structured posterior."""

    prior: StructuredPrior
    delta: float

    def __call__(self, data: LoggedDataset, instance=None) -> Policy:
        return PessimisticPolicy(fit_posterior(self.prior, data), self.delta)


@dataclass(frozen=True)
class MarginalGreedyLearner:
    """Greedy policy on the marginalized (non-structured) posterior."""

    prior: StructuredPrior

    def __call__(self, data: LoggedDataset, instance=None) -> Policy:
        return GreedyPolicy(self.reward_model(data), self.prior.n_actions)

    def reward_model(self, data: LoggedDataset) -> RewardModel:
        post = fit_nonstructured(marginalize_structured(self.prior), data)
        return LinearRewardModel(post.means)


@dataclass(frozen=True)
class FreqGreedyLearner:
    """Greedy policy on per-action ridge-regression estimates."""

    n_actions: int
    ridge: float = 1.0

    def __call__(self, data: LoggedDataset, instance=None) -> Policy:
        return GreedyPolicy(dm_freq_model(data, self.ridge), self.n_actions)

    def reward_model(self, data: LoggedDataset) -> RewardModel:
        return dm_freq_model(data, self.ridge)


@dataclass(frozen=True)
class LogisticStructuredGreedyLearner:
    """Structured posterior with the Gaussian-approximated logistic likelihood."""

    prior: StructuredPrior
    ridge: float = 1e-4
    form: str = "variance"

    def __call__(self, data: LoggedDataset, instance=None) -> Policy:
        return GreedyPolicy(self.reward_model(data), self.prior.n_actions)

    def reward_model(self, data: LoggedDataset) -> RewardModel:
        post = structured_update_logistic(self.prior, fit_logistic_stats(data, self.ridge))
        return LogisticRewardModel(post, self.form)


@dataclass(frozen=True)
class LogisticMarginalGreedyLearner:
    prior: StructuredPrior
    ridge: float = 1e-4
    form: str = "variance"

    def __call__(self, data: LoggedDataset, instance=None) -> Policy:
        return GreedyPolicy(self.reward_model(data), self.prior.n_actions)

    def reward_model(self, data: LoggedDataset) -> RewardModel:
        post = nonstructured_update_logistic(
            marginalize_structured(self.prior), fit_logistic_stats(data, self.ridge)
        )
        return LogisticRewardModel(post, self.form)


@dataclass(frozen=True)
class LogisticFreqGreedyLearner:
    n_actions: int
    ridge: float = 1e-4

    def __call__(self, data: LoggedDataset, instance=None) -> Policy:
        return GreedyPolicy(self.reward_model(data), self.n_actions)

    def reward_model(self, data: LoggedDataset) -> RewardModel:
        return SigmoidPointModel(fit_logistic_stats(data, self.ridge).mle_means)


@dataclass(frozen=True)
class UniformLearner:
    n_actions: int

    def __call__(self, data: LoggedDataset, instance=None) -> Policy:
        return UniformPolicy(self.n_actions)


@dataclass(frozen=True)
class EpsilonGreedyStructuredLearner:
    """Epsilon-greedy exploration around the structured posterior's greedy arm."""

    prior: StructuredPrior
    epsilon: float

    def __call__(self, data: LoggedDataset, instance=None) -> Policy:
        post = fit_posterior(self.prior, data)
        return EpsilonGreedyPolicy(
            LinearRewardModel(post.means), self.epsilon, self.prior.n_actions
        )


@dataclass(frozen=True)
class OracleLearner:
    """Returns the true optimal policy; a diagnostic baseline."""

    def __call__(self, data: LoggedDataset, instance: ProblemInstance) -> Policy:
        return optimal_policy(instance)


@dataclass(frozen=True)
class OplLearner:
    """Gradient-ascent policy search on a differentiable off-policy estimator."""

    estimator: str
    steps: int = 2000
    step_size: float = 0.1
    temperature: float = 1.0
    clip: float = 0.0
    freq_ridge: float = 1.0
    structure: ActionStructure | None = None
    k: int | None = None
    logging_policy: Policy | None = None

    def __call__(self, data: LoggedDataset, instance=None) -> Policy:
        if data.n == 0:
            return SoftmaxPolicy(np.zeros((data.n_actions, data.dim)), self.temperature)
        kwargs = {}
        if self.estimator in ("ips", "dr"):
            kwargs["clip"] = self.clip
        if self.estimator == "dr":
            kwargs["model"] = dm_freq_model(data, self.freq_ridge)
        if self.estimator in ("mips", "pc"):
            kwargs["structure"] = self.structure
            kwargs["logging_policy"] = self.logging_policy
        if self.estimator == "pc":
            kwargs["k"] = self.k
        return opl_optimize(
            self.estimator, data,
            steps=self.steps, step_size=self.step_size, temperature=self.temperature,
            **kwargs,
        )
