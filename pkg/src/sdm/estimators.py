"""Off-policy value estimators and the gradient-based policy optimizer.

Every estimator is an exact function of the evaluated policy's action
probabilities at the logged contexts. For optimization they are expressed as
(value, gradient-with-respect-to-probabilities) pairs, and a shared softmax
chain rule turns that into parameter gradients; the analytic gradients are
validated against finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ParameterError, ShapeError
from .policies import LinearRewardModel, Policy, RewardModel, SoftmaxPolicy
from .posterior import LoggedDataset


@dataclass(frozen=True)
class ValueEstimate:
    """A policy-value estimate together with its provenance."""

    value: float
    estimator: str
    n_used: int
    degenerate: bool = False

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericalError(f"{self.estimator}: non-finite value estimate")


@dataclass(frozen=True)
class ActionStructure:
    """Action-side information: cluster labels and neighbor orderings.

    ``cluster_of[a]`` is the cluster id of action a. ``neighbor_order[a]`` lists
    all actions by increasing embedding distance from a (a itself first), so the
    k-nearest-neighbor set of a is ``neighbor_order[a, :k]``.
    """

    cluster_of: np.ndarray
    neighbor_order: np.ndarray

    def __post_init__(self):
        clusters = np.ascontiguousarray(self.cluster_of, dtype=np.int64)
        order = np.ascontiguousarray(self.neighbor_order, dtype=np.int64)
        k = clusters.shape[0]
        if order.shape != (k, k):
            raise ShapeError(f"neighbor_order must be ({k}, {k}), got {order.shape}")
        if np.any(np.sort(order, axis=1) != np.arange(k)):
            raise ShapeError("each neighbor_order row must be a permutation of all actions")
        if np.any(order[:, 0] != np.arange(k)):
            raise ShapeError("every action must be its own nearest neighbor")
        if k and (clusters.min() < 0 or np.any(np.diff(np.unique(clusters)) != 1)
                  or clusters.min() != 0):
            raise ShapeError("cluster ids must be contiguous integers starting at 0")
        object.__setattr__(self, "cluster_of", clusters)
        object.__setattr__(self, "neighbor_order", order)

    @property
    def n_actions(self) -> int:
        return self.cluster_of.shape[0]

    @property
    def n_clusters(self) -> int:
        return int(self.cluster_of.max()) + 1 if self.n_actions else 0

    def neighborhood(self, a: int, k: int) -> np.ndarray:
        if not (1 <= k <= self.n_actions):
            raise ParameterError(f"k must be in [1, {self.n_actions}], got {k}")
        return self.neighbor_order[a, :k]


def neighbor_order_from_embeddings(embeddings: np.ndarray) -> np.ndarray:
    """Sort actions by Euclidean embedding distance; stable, self first."""
    emb = np.asarray(embeddings, dtype=float)
    sq = (emb ** 2).sum(axis=1)
    dists = sq[:, None] + sq[None, :] - 2.0 * emb @ emb.T
    np.fill_diagonal(dists, -1.0)  # self strictly first even under exact ties
    return np.argsort(dists, axis=1, kind="stable").astype(np.int64)


def _taken(matrix: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return matrix[np.arange(matrix.shape[0]), actions]


def dm_value(policy: Policy, data: LoggedDataset, model: RewardModel) -> ValueEstimate:
    """Model-based value: average over contexts of the policy-weighted scores."""
    if data.n == 0:
        return ValueEstimate(0.0, "dm", 0, degenerate=True)
    probs = policy.probs_batch(data.contexts)
    scores = model.scores_batch(data.contexts)
    return ValueEstimate(float((probs * scores).sum(axis=1).mean()), "dm", data.n)


def ips_value(policy: Policy, data: LoggedDataset, clip: float = 0.0) -> ValueEstimate:
    """Importance-weighted reward mean with propensities clipped at ``clip``."""
    if not (0.0 <= clip <= 1.0):
        raise ParameterError(f"clip must be in [0, 1], got {clip}")
    if data.n == 0:
        return ValueEstimate(0.0, "ips", 0, degenerate=True)
    weights = _taken(policy.probs_batch(data.contexts), data.actions)
    weights = weights / np.maximum(data.propensities, clip)
    return ValueEstimate(float((weights * data.rewards).mean()), "ips", data.n)


def snips_value(policy: Policy, data: LoggedDataset) -> ValueEstimate:
    """Self-normalized importance weighting; degenerate when all weights vanish."""
    if data.n == 0:
        return ValueEstimate(0.0, "snips", 0, degenerate=True)
    weights = _taken(policy.probs_batch(data.contexts), data.actions) / data.propensities
    total = weights.sum()
    if total == 0.0:
        return ValueEstimate(0.0, "snips", data.n, degenerate=True)
    return ValueEstimate(float(weights @ data.rewards / total), "snips", data.n)


def dr_value(
    policy: Policy, data: LoggedDataset, model: RewardModel, clip: float = 0.0
) -> ValueEstimate:
    """Doubly robust: model baseline plus importance-weighted residuals."""
    if not (0.0 <= clip <= 1.0):
        raise ParameterError(f"clip must be in [0, 1], got {clip}")
    if data.n == 0:
        return ValueEstimate(0.0, "dr", 0, degenerate=True)
    probs = policy.probs_batch(data.contexts)
    scores = model.scores_batch(data.contexts)
    weights = _taken(probs, data.actions) / np.maximum(data.propensities, clip)
    residuals = data.rewards - _taken(scores, data.actions)
    value = (weights * residuals + (probs * scores).sum(axis=1)).mean()
    return ValueEstimate(float(value), "dr", data.n)


def _cluster_masses(probs: np.ndarray, structure: ActionStructure) -> np.ndarray:
    member = np.zeros((structure.n_actions, structure.n_clusters))
    member[np.arange(structure.n_actions), structure.cluster_of] = 1.0
    return probs @ member


def mips_value(
    policy: Policy,
    data: LoggedDataset,
    structure: ActionStructure,
    logging_policy: Policy,
) -> ValueEstimate:
    """Importance weighting at the cluster level instead of single actions.

    The logging policy is required explicitly: logged per-action propensities do
    not determine the mass the logging policy put on a whole cluster.
    """
    if data.n == 0:
        return ValueEstimate(0.0, "mips", 0, degenerate=True)
    taken_clusters = structure.cluster_of[data.actions]
    target = _taken(_cluster_masses(policy.probs_batch(data.contexts), structure), taken_clusters)
    logged = _taken(
        _cluster_masses(logging_policy.probs_batch(data.contexts), structure), taken_clusters
    )
    value = (target / logged * data.rewards).mean()
    return ValueEstimate(float(value), "mips", data.n)


def _neighbor_mask(structure: ActionStructure, actions: np.ndarray, k: int) -> np.ndarray:
    mask = np.zeros((len(actions), structure.n_actions))
    rows = np.repeat(np.arange(len(actions)), k)
    cols = structure.neighbor_order[actions, :k].ravel()
    mask[rows, cols] = 1.0
    return mask


def pc_value(
    policy: Policy,
    data: LoggedDataset,
    structure: ActionStructure,
    k: int,
    logging_policy: Policy,
) -> ValueEstimate:
    """Importance weighting with masses pooled over k-nearest-neighbor sets."""
    if data.n == 0:
        return ValueEstimate(0.0, "pc", 0, degenerate=True)
    if not (1 <= k <= structure.n_actions):
        raise ParameterError(f"k must be in [1, {structure.n_actions}], got {k}")
    mask = _neighbor_mask(structure, data.actions, k)
    target = (policy.probs_batch(data.contexts) * mask).sum(axis=1)
    logged = (logging_policy.probs_batch(data.contexts) * mask).sum(axis=1)
    value = (target / logged * data.rewards).mean()
    return ValueEstimate(float(value), "pc", data.n)


def dm_freq_model(data: LoggedDataset, ridge: float) -> LinearRewardModel:
    """Per-action ridge regression on raw (noise-unscaled) sums.

    Actions without data get a zero coefficient vector.
    """
    if ridge < 0:
        raise ParameterError(f"ridge must be >= 0, got {ridge}")
    k, d = data.n_actions, data.dim
    means = np.zeros((k, d))
    for a in range(k):
        mask = data.actions == a
        if not mask.any():
            continue
        xa = data.contexts[mask]
        gram = xa.T @ xa + ridge * np.eye(d)
        means[a] = np.linalg.solve(gram, data.rewards[mask] @ xa)
    return LinearRewardModel(means)


# --- OPL over softmax-linear policies -------------------------------------

class _LinearObjective:
    """V(P) = sum_ia coeffs[i, a] P[i, a] for probability matrix P."""

    def __init__(self, coeffs: np.ndarray):
        self.coeffs = coeffs

    def value_and_grad(self, probs: np.ndarray):
        return float((self.coeffs * probs).sum()), self.coeffs


class _RatioObjective:
    """V(P) = (sum numer * P) / (sum denom * P), the self-normalized case."""

    def __init__(self, numer: np.ndarray, denom: np.ndarray):
        self.numer = numer
        self.denom = denom

    def value_and_grad(self, probs: np.ndarray):
        top = (self.numer * probs).sum()
        bottom = (self.denom * probs).sum()
        if bottom == 0.0:
            return 0.0, np.zeros_like(probs)
        value = top / bottom
        return float(value), self.numer / bottom - value * self.denom / bottom


def _opl_objective(
    estimator: str,
    data: LoggedDataset,
    *,
    clip: float = 0.0,
    model: RewardModel | None = None,
    structure: ActionStructure | None = None,
    k: int | None = None,
    logging_policy: Policy | None = None,
):
    n, n_actions = data.n, data.n_actions
    one_hot = np.zeros((n, n_actions))
    one_hot[np.arange(n), data.actions] = 1.0
    if estimator == "ips":
        coeffs = one_hot * (data.rewards / np.maximum(data.propensities, clip) / n)[:, None]
        return _LinearObjective(coeffs)
    if estimator == "snips":
        inv = 1.0 / data.propensities
        return _RatioObjective(one_hot * (data.rewards * inv)[:, None], one_hot * inv[:, None])
    if estimator == "dr":
        if model is None:
            raise ParameterError("dr optimization requires a reward model")
        scores = model.scores_batch(data.contexts)
        residual = data.rewards - _taken(scores, data.actions)
        coeffs = scores / n + one_hot * (residual / np.maximum(data.propensities, clip) / n)[:, None]
        return _LinearObjective(coeffs)
    if estimator == "mips":
        if structure is None or logging_policy is None:
            raise ParameterError("mips optimization requires structure and logging_policy")
        member = (
            structure.cluster_of[None, :] == structure.cluster_of[data.actions][:, None]
        ).astype(float)
        logged = _taken(
            _cluster_masses(logging_policy.probs_batch(data.contexts), structure),
            structure.cluster_of[data.actions],
        )
        return _LinearObjective(member * (data.rewards / logged / n)[:, None])
    if estimator == "pc":
        if structure is None or k is None or logging_policy is None:
            raise ParameterError("pc optimization requires structure, k, and logging_policy")
        mask = _neighbor_mask(structure, data.actions, k)
        logged = (logging_policy.probs_batch(data.contexts) * mask).sum(axis=1)
        return _LinearObjective(mask * (data.rewards / logged / n)[:, None])
    raise ParameterError(f"unknown differentiable estimator {estimator!r}")


def opl_value_and_gradient(
    estimator: str,
    data: LoggedDataset,
    params: np.ndarray,
    temperature: float = 1.0,
    **kwargs,
) -> tuple[float, np.ndarray]:
    """Estimator value and its exact gradient in the softmax parameters."""
    objective = _opl_objective(estimator, data, **kwargs)
    policy = SoftmaxPolicy(params, temperature)
    probs = policy.probs_batch(data.contexts)
    value, dprobs = objective.value_and_grad(probs)
    dlogits = probs * (dprobs - (probs * dprobs).sum(axis=1, keepdims=True))
    grad = dlogits.T @ data.contexts / temperature
    return value, grad


def opl_optimize(
    estimator: str,
    data: LoggedDataset,
    steps: int = 2000,
    step_size: float = 0.1,
    temperature: float = 1.0,
    **kwargs,
) -> SoftmaxPolicy:
    """Constant-step gradient ascent over softmax-linear policies.

    Starts from zero parameters (the uniform policy) and returns the iterate
    with the highest estimator value seen.
    """
    if data.n == 0:
        raise ParameterError("cannot optimize a policy on an empty dataset")
    objective = _opl_objective(estimator, data, **kwargs)
    params = np.zeros((data.n_actions, data.dim))
    contexts = data.contexts
    inv_temp = 1.0 / temperature

    def forward(theta):
        logits = contexts @ theta.T * inv_temp
        logits -= logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        return weights / weights.sum(axis=1, keepdims=True)

    best_value, best_params = objective.value_and_grad(forward(params))[0], params.copy()
    for step in range(steps):
        probs = forward(params)
        value, dprobs = objective.value_and_grad(probs)
        dlogits = probs * (dprobs - (probs * dprobs).sum(axis=1, keepdims=True))
        grad = dlogits.T @ contexts * inv_temp
        if not np.all(np.isfinite(grad)):
            raise NumericalError(
                f"{estimator} optimization produced a non-finite gradient at step {step} "
                f"(value={value!r})"
            )
        if value > best_value:
            best_value, best_params = value, params.copy()
        params = params + step_size * grad
    final_value = objective.value_and_grad(forward(params))[0]
    if final_value > best_value:
        best_params = params
    return SoftmaxPolicy(best_params, temperature)
