"""Monte Carlo metrics (suboptimality, squared error, relative reward) and
numerical evaluators of the posterior-covariance and explicit sample-size
bounds.

Replication design: each metric draws a root seed from the caller's generator
and derives independent per-replication streams from (root, replication,
purpose). Two metric calls made with identically seeded generators therefore
see the same instances and logs replication by replication, which is how
paired comparisons are run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envsim import (
    LINEAR,
    ContextDistribution,
    ProblemInstance,
    generate_log,
    sample_instance,
)
from .errors import ParameterError
from .policies import Policy, alpha_radius
from .posterior import StructuredPrior, fit_posterior, marginalize_structured

__all__ = [
    "McReport",
    "NOT_APPLICABLE",
    "NotApplicableType",
    "alpha_radius",
    "ci_coverage",
    "covariance_bound",
    "estimate_moment_ratio",
    "explicit_bound",
    "mc_bmse",
    "mc_bso",
    "mc_reward_uncertainty",
    "relative_reward",
]


class NotApplicableType:
    """Singleton result for bounds whose preconditions fail."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NotApplicable"


NOT_APPLICABLE = NotApplicableType()


@dataclass(frozen=True)
class McReport:
    """Aggregate of per-replication metric values."""

    mean: float
    std_error: float
    replications: int
    values: tuple = field(repr=False)
    skipped: int = 0

    @classmethod
    def from_values(cls, values, skipped: int = 0) -> "McReport":
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            raise ParameterError("a Monte Carlo report needs at least one replication")
        # Compensated summation keeps aggregation order-independent.
        mean = float(math.fsum(arr) / arr.size)
        se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        return cls(mean, se, arr.size, tuple(arr.tolist()), skipped)


def _normalize_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _root_seed(rng) -> int:
    return int(_normalize_rng(rng).integers(2 ** 63))


def _stream(root: int, rep: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng((root, rep, purpose))


_ENV, _LEARN, _EVAL = 0, 1, 2


def _eval_contexts(instance: ProblemInstance, eval_rng, n_value_contexts: int) -> np.ndarray:
    pool = instance.contexts.exact_points()
    if pool is not None:
        return pool
    return instance.contexts.sample(n_value_contexts, eval_rng)


def _replicate(prior, logging_policy, n, reps, rng, reward_kind, contexts, body):
    if reps < 1:
        raise ParameterError(f"reps must be >= 1, got {reps}")
    root = _root_seed(rng)
    out = []
    for rep in range(reps):
        env_rng = _stream(root, rep, _ENV)
        instance = sample_instance(prior, reward_kind, env_rng, contexts)
        log = generate_log(instance, logging_policy, n, prior.noise_sd, env_rng)
        out.append(body(root, rep, instance, log))
    return out


def mc_bso(
    prior: StructuredPrior,
    learner,
    logging_policy: Policy,
    n: int,
    reps: int,
    rng,
    *,
    reward_kind: str = LINEAR,
    contexts: ContextDistribution | None = None,
    n_value_contexts: int = 512,
) -> McReport:
    """Average value gap between the optimal policy and the learned policy,
    over fresh (instance, log) draws from the prior."""

    def body(root, rep, instance, log):
        policy = learner(log, instance)
        eval_x = _eval_contexts(instance, _stream(root, rep, _EVAL), n_value_contexts)
        rewards = instance.reward_matrix(eval_x)
        optimal = rewards.max(axis=1).mean()
        achieved = (policy.probs_batch(eval_x) * rewards).sum(axis=1).mean()
        return optimal - achieved

    values = _replicate(prior, logging_policy, n, reps, rng, reward_kind, contexts, body)
    return McReport.from_values(values)


def relative_reward(
    prior: StructuredPrior,
    learner,
    logging_policy: Policy,
    n: int,
    reps: int,
    rng,
    *,
    reward_kind: str = LINEAR,
    contexts: ContextDistribution | None = None,
    n_value_contexts: int = 512,
) -> McReport:
    """Per-replication ratio of learned-policy value to optimal value.

    Replications whose optimal value is numerically zero are skipped and
    counted in the report."""

    def body(root, rep, instance, log):
        policy = learner(log, instance)
        eval_x = _eval_contexts(instance, _stream(root, rep, _EVAL), n_value_contexts)
        rewards = instance.reward_matrix(eval_x)
        optimal = rewards.max(axis=1).mean()
        achieved = (policy.probs_batch(eval_x) * rewards).sum(axis=1).mean()
        return optimal, achieved

    pairs = _replicate(prior, logging_policy, n, reps, rng, reward_kind, contexts, body)
    ratios = [ach / opt for opt, ach in pairs if abs(opt) >= 1e-9]
    return McReport.from_values(ratios, skipped=reps - len(ratios))


def mc_bmse(
    prior: StructuredPrior,
    x: np.ndarray,
    a: int,
    logging_policy: Policy,
    n: int,
    reps: int,
    rng,
    *,
    contexts: ContextDistribution | None = None,
) -> McReport:
    """Squared error of the posterior-mean reward estimate at a fixed probe."""
    x = np.asarray(x, dtype=float)

    def body(root, rep, instance, log):
        post = fit_posterior(prior, log)
        err = float(x @ post.means[a]) - float(x @ instance.theta[a])
        return err * err

    values = _replicate(prior, logging_policy, n, reps, rng, LINEAR, contexts, body)
    return McReport.from_values(values)


def mc_reward_uncertainty(
    prior: StructuredPrior,
    x: np.ndarray,
    a: int,
    logging_policy: Policy,
    n: int,
    reps: int,
    rng,
    *,
    contexts: ContextDistribution | None = None,
) -> McReport:
    """Monte Carlo average of the posterior quadratic form x^T cov_a x."""
    x = np.asarray(x, dtype=float)

    def body(root, rep, instance, log):
        post = fit_posterior(prior, log)
        return float(x @ post.covs[a] @ x)

    values = _replicate(prior, logging_policy, n, reps, rng, LINEAR, contexts, body)
    return McReport.from_values(values)


def covariance_bound(
    prior: StructuredPrior,
    logging_policy: Policy,
    n: int,
    reps: int,
    rng,
    *,
    contexts: ContextDistribution | None = None,
    n_value_contexts: int = 512,
) -> McReport:
    """Monte Carlo evaluation of 2 sqrt(d) E[ ||x||_{cov of optimal arm} ]."""

    def body(root, rep, instance, log):
        post = fit_posterior(prior, log)
        eval_x = _eval_contexts(instance, _stream(root, rep, _EVAL), n_value_contexts)
        best = np.argmax(instance.reward_matrix(eval_x), axis=1)
        quad = np.einsum("ni,nij,nj->n", eval_x, post.covs[best], eval_x)
        return 2.0 * math.sqrt(instance.dim) * np.sqrt(np.maximum(quad, 0.0)).mean()

    values = _replicate(prior, logging_policy, n, reps, rng, LINEAR, contexts, body)
    return McReport.from_values(values)


def explicit_bound(
    n: int,
    d: int,
    g: float,
    h: float,
    noise_sd: float,
    action_sd: float,
    latent_sd: float,
    mass_samples,
) -> float | NotApplicableType:
    """Closed-form sample-size bound evaluated on logging-policy mass samples.

    ``mass_samples`` are draws of the logging policy's probability on the
    optimal action. Returns NOT_APPLICABLE when the effective-count term
    alpha_x is non-positive for any sample (the bound's precondition fails).
    """
    masses = np.asarray(mass_samples, dtype=float)
    if masses.size == 0:
        raise ParameterError("mass_samples must be non-empty")
    if np.any(masses <= 0.0) or np.any(masses > 1.0):
        raise ParameterError("mass samples must lie in (0, 1]")
    if n < 1 or d < 1:
        raise ParameterError(f"n and d must be >= 1, got n={n}, d={d}")
    if not (g > 0):
        raise ParameterError(f"g must be > 0, got {g}")
    if not (h >= 1):
        raise ParameterError(f"h must be >= 1, got {h}")
    if not (noise_sd > 0 and action_sd > 0 and latent_sd >= 0):
        raise ParameterError("noise_sd and action_sd must be > 0, latent_sd >= 0")

    counts = np.floor(masses * n / 2.0)
    alphas = counts - 7.0 * h * np.sqrt(counts * (d + 2.0 * math.log(n)))
    if np.any(alphas <= 0.0):
        return NOT_APPLICABLE

    denom = g * alphas / noise_sd ** 2 + action_sd ** -2
    tail_var = action_sd ** 2 + latent_sd ** 2
    inner = (
        d / denom
        + latent_sd ** 2 * action_sd ** -4 * d / denom ** 2
        + tail_var * d * np.exp(-n * masses ** 2 / 2.0)
    )
    return float(2.0 * math.sqrt(inner.mean() + 2.0 * d * tail_var / n))


def estimate_moment_ratio(
    context_dist: ContextDistribution,
    rng,
    n_vectors: int = 10_000,
    n_samples: int = 100_000,
    safety: float = 1.1,
) -> float:
    """Estimate the fourth-moment ratio constant for the explicit bound.

    Max over random unit directions v of sqrt(E[(v^T x)^4]) / (v^T G v),
    estimated from Monte Carlo context samples and inflated by ``safety``.
    Never below 1, the constant's theoretical floor.
    """
    rng = _normalize_rng(rng)
    samples = context_dist.sample(n_samples, rng)
    gram = samples.T @ samples / n_samples
    worst = 1.0
    chunk = 256
    for start in range(0, n_vectors, chunk):
        count = min(chunk, n_vectors - start)
        vecs = rng.standard_normal((context_dist.dim, count))
        vecs /= np.linalg.norm(vecs, axis=0, keepdims=True)
        squared = np.square(samples @ vecs)
        fourth = np.sqrt(np.square(squared).mean(axis=0))
        second = np.einsum("dc,de,ec->c", vecs, gram, vecs)
        worst = max(worst, float((fourth / second).max()))
    return safety * worst


def ci_coverage(
    prior: StructuredPrior,
    logging_policy: Policy,
    n: int,
    delta: float,
    mode: str,
    reps: int,
    rng,
    *,
    c_norm: float = 1.0,
    probe_x: np.ndarray | None = None,
    probe_action: int = 0,
    contexts: ContextDistribution | None = None,
) -> McReport:
    """Empirical coverage of reward confidence intervals at a fixed probe.

    "bayes" mode uses radius alpha_radius(d, delta) * ||x||_cov. "freq" mode
    widens it by (c_norm + ||posterior mean||) / sqrt(min eigenvalue of the
    marginal action prior), the misspecification allowance of the frequentist
    interval.
    """
    if mode not in ("bayes", "freq"):
        raise ParameterError(f"mode must be 'bayes' or 'freq', got {mode!r}")
    if not (0.0 < delta < 1.0):
        raise ParameterError(f"delta must be in (0, 1), got {delta}")
    root = _root_seed(rng)
    if probe_x is None:
        from .envsim import UniformCube

        base = contexts if contexts is not None else UniformCube(prior.dim)
        probe_x = base.sample(1, np.random.default_rng((root, 3)))[0]
    probe_x = np.asarray(probe_x, dtype=float)
    radius_scale = alpha_radius(prior.dim, delta)
    if mode == "freq":
        marg = marginalize_structured(prior)
        lam_min = float(np.linalg.eigvalsh(marg.covs[probe_action])[0])

    hits = []
    for rep in range(reps):
        env_rng = _stream(root, rep, _ENV)
        instance = sample_instance(prior, LINEAR, env_rng, contexts)
        log = generate_log(instance, logging_policy, n, prior.noise_sd, env_rng)
        post = fit_posterior(prior, log)
        center = float(probe_x @ post.means[probe_action])
        norm_x = math.sqrt(max(float(probe_x @ post.covs[probe_action] @ probe_x), 0.0))
        scale = radius_scale
        if mode == "freq":
            scale += (c_norm + float(np.linalg.norm(post.means[probe_action]))) / math.sqrt(lam_min)
        truth = float(probe_x @ instance.theta[probe_action])
        hits.append(1.0 if abs(truth - center) <= scale * norm_x else 0.0)
    return McReport.from_values(hits)
