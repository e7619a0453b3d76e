"""Build priors and semi-synthetic environments from ratings data.

Pipeline: parse a ratings CSV into a (user x item) matrix with an observation
mask, optionally normalize it, factorize with alternating least squares into
user/item vectors, cluster the item vectors with a Gaussian mixture, and turn
the clusters into a mixed-effect hierarchy (every item's parameter is a
responsibility-weighted mix of cluster effects).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .errors import DataError, ParameterError, ShapeError
from .linalg import floor_eigenvalues
from .posterior import NonStructuredPrior, StructuredPrior

CSV_HEADER = "user_id,item_id,value"
COV_FLOOR = 1e-6


@dataclass(frozen=True)
class RatingsMatrix:
    """Dense ratings with an observed-entry mask."""

    values: np.ndarray
    mask: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if vals.ndim != 2 or vals.shape[0] < 1 or vals.shape[1] < 1:
            raise ShapeError(f"values must be a non-empty (U, I) matrix, got {vals.shape}")
        if mask.shape != vals.shape:
            raise ShapeError("mask shape must match values")
        if not np.all(np.isfinite(vals[mask])):
            raise DataError("observed ratings contain non-finite values")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "mask", mask)

    @property
    def n_users(self) -> int:
        return self.values.shape[0]

    @property
    def n_items(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_dense(cls, values, mask=None) -> "RatingsMatrix":
        values = np.asarray(values, dtype=float)
        if mask is None:
            mask = np.ones_like(values, dtype=bool)
        return cls(values, mask,
                   np.arange(values.shape[0]), np.arange(values.shape[1]))


def load_ratings(path, fmt: str = "csv") -> RatingsMatrix:
    """Parse a ``user_id,item_id,value`` CSV; malformed rows fail with their line number."""
    if fmt != "csv":
        raise ParameterError(f"unsupported ratings format {fmt!r}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty ratings file")
    if lines[0].strip() != CSV_HEADER:
        raise DataError(f"{path}:1: expected header {CSV_HEADER!r}, got {lines[0]!r}")
    triples: list[tuple[int, int, float]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 comma-separated fields")
        try:
            user, item = int(parts[0]), int(parts[1])
            value = float(parts[2])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if not np.isfinite(value):
            raise DataError(f"{path}:{lineno}: non-finite rating value {parts[2]!r}")
        triples.append((user, item, value))
    if not triples:
        raise DataError(f"{path}: no rating rows")
    user_ids = np.unique([t[0] for t in triples])
    item_ids = np.unique([t[1] for t in triples])
    user_index = {u: i for i, u in enumerate(user_ids)}
    item_index = {v: i for i, v in enumerate(item_ids)}
    values = np.zeros((len(user_ids), len(item_ids)))
    mask = np.zeros_like(values, dtype=bool)
    for user, item, value in triples:
        r, c = user_index[user], item_index[item]
        if mask[r, c]:
            raise DataError(f"{path}: duplicate rating for user {user}, item {item}")
        values[r, c] = value
        mask[r, c] = True
    return RatingsMatrix(values, mask, user_ids, item_ids)


def preprocess_kuairec(matrix: RatingsMatrix, clip_max: float = 10.0) -> RatingsMatrix:
    """Clip scores at ``clip_max`` and scale each user's row by its maximum.

    Users whose observed entries are all <= 0 keep their values untouched
    (the per-user maximum would be a divide-by-zero).
    """
    if not (clip_max > 0):
        raise ParameterError(f"clip_max must be > 0, got {clip_max}")
    values = np.where(matrix.mask, np.minimum(matrix.values, clip_max), 0.0)
    out = values.copy()
    for u in range(matrix.n_users):
        observed = matrix.mask[u]
        if not observed.any():
            continue
        top = values[u, observed].max()
        if top <= 0.0:
            continue
        out[u, observed] = values[u, observed] / top
    return RatingsMatrix(out, matrix.mask, matrix.user_ids, matrix.item_ids)


@dataclass(frozen=True)
class Factorization:
    user_factors: np.ndarray
    item_factors: np.ndarray
    objectives: tuple

    def reconstruction(self) -> np.ndarray:
        return self.user_factors @ self.item_factors.T


def factorize(
    matrix: RatingsMatrix,
    rank: int,
    iterations: int = 50,
    reg: float = 0.1,
    seed: int = 0,
    tol: float = 1e-6,
) -> Factorization:
    """Alternating ridge least squares on the observed entries.

    Each half-sweep solves its block exactly, so the regularized objective is
    non-increasing; stops early when its relative change drops below ``tol``.
    """
    if rank < 1:
        raise ParameterError(f"rank must be >= 1, got {rank}")
    if reg < 0:
        raise ParameterError(f"reg must be >= 0, got {reg}")
    rng = np.random.default_rng(seed)
    users = 0.1 * rng.standard_normal((matrix.n_users, rank))
    items = 0.1 * rng.standard_normal((matrix.n_items, rank))
    eye = np.eye(rank)

    def half_sweep(target, fixed, mask, values):
        for row in range(target.shape[0]):
            observed = mask[row]
            if not observed.any():
                target[row] = 0.0
                continue
            basis = fixed[observed]
            gram = basis.T @ basis + reg * eye
            target[row] = np.linalg.solve(gram, basis.T @ values[row, observed])

    def objective():
        resid = np.where(matrix.mask, matrix.values - users @ items.T, 0.0)
        return float((resid ** 2).sum() + reg * ((users ** 2).sum() + (items ** 2).sum()))

    objectives = [objective()]
    for _ in range(iterations):
        half_sweep(users, items, matrix.mask, matrix.values)
        half_sweep(items, users, matrix.mask.T, matrix.values.T)
        objectives.append(objective())
        prev, cur = objectives[-2], objectives[-1]
        if prev > 0 and (prev - cur) / prev < tol:
            break
    return Factorization(users, items, tuple(objectives))


@dataclass(frozen=True)
class GmmFit:
    """Gaussian mixture parameters with per-point responsibilities."""

    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    responsibilities: np.ndarray
    log_likelihoods: tuple


def _kmeans_pp_means(vectors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Spread-out initial means: each next center drawn with probability
    proportional to squared distance from the chosen ones."""
    n = vectors.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(1, k):
        dists = np.min(
            ((vectors[:, None, :] - vectors[chosen][None, :, :]) ** 2).sum(axis=2), axis=1
        )
        total = dists.sum()
        if total <= 0:
            chosen.append(int(rng.integers(n)))
            continue
        chosen.append(int(rng.choice(n, p=dists / total)))
    return vectors[chosen].copy()


def _log_gaussian(vectors: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = vectors.shape[1]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ParameterError("mixture covariance became non-positive-definite")
    centered = vectors - mean
    solved = np.linalg.solve(cov, centered.T).T
    quad = np.einsum("ij,ij->i", centered, solved)
    return -0.5 * (quad + logdet + d * np.log(2.0 * np.pi))


def fit_gmm(
    vectors: np.ndarray,
    n_components: int,
    iterations: int = 100,
    seed: int = 0,
) -> GmmFit:
    """EM for a full-covariance Gaussian mixture.

    Covariances are eigenvalue-floored each M-step; the observed-data
    log-likelihood is tracked per iteration and is non-decreasing.
    """
    vectors = np.asarray(vectors, dtype=float)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise ShapeError(f"vectors must be (m, d) with m >= 1, got {vectors.shape}")
    m, d = vectors.shape
    if not (1 <= n_components <= m):
        raise ParameterError(f"n_components must be in [1, {m}], got {n_components}")
    rng = np.random.default_rng(seed)
    means = _kmeans_pp_means(vectors, n_components, rng)
    base_cov = floor_eigenvalues(np.cov(vectors.T, bias=True).reshape(d, d), COV_FLOOR)
    covs = np.stack([base_cov.copy() for _ in range(n_components)])
    weights = np.full(n_components, 1.0 / n_components)

    log_likelihoods = []
    responsibilities = np.full((m, n_components), 1.0 / n_components)
    for _ in range(iterations):
        log_dens = np.stack(
            [np.log(weights[j]) + _log_gaussian(vectors, means[j], covs[j])
             for j in range(n_components)],
            axis=1,
        )
        shift = log_dens.max(axis=1, keepdims=True)
        dens = np.exp(log_dens - shift)
        total = dens.sum(axis=1, keepdims=True)
        responsibilities = dens / total
        log_likelihoods.append(float((np.log(total[:, 0]) + shift[:, 0]).sum()))

        mass = responsibilities.sum(axis=0)
        weights = mass / m
        for j in range(n_components):
            if mass[j] <= 0:
                continue
            means[j] = responsibilities[:, j] @ vectors / mass[j]
            centered = vectors - means[j]
            cov = (responsibilities[:, j][:, None] * centered).T @ centered / mass[j]
            covs[j] = floor_eigenvalues(cov, COV_FLOOR)
        if len(log_likelihoods) >= 2 and abs(
            log_likelihoods[-1] - log_likelihoods[-2]
        ) < 1e-12 * max(1.0, abs(log_likelihoods[-1])):
            break
    return GmmFit(means, covs, weights, responsibilities, tuple(log_likelihoods))


def gmm_responsibilities(fit: GmmFit, vectors: np.ndarray) -> np.ndarray:
    """Posterior component probabilities for new vectors under a fitted mixture."""
    vectors = np.asarray(vectors, dtype=float)
    log_dens = np.stack(
        [np.log(fit.weights[j]) + _log_gaussian(vectors, fit.means[j], fit.covariances[j])
         for j in range(fit.means.shape[0])],
        axis=1,
    )
    shift = log_dens.max(axis=1, keepdims=True)
    dens = np.exp(log_dens - shift)
    return dens / dens.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class MixedEffectPrior:
    """Structured prior whose mixing matrices have the block pattern
    W_a = [w_a1 I_d | ... | w_aJ I_d] induced by mixture responsibilities."""

    weights: np.ndarray
    prior: StructuredPrior

    @property
    def n_effects(self) -> int:
        return self.weights.shape[1]


def mixing_from_weights(weights: np.ndarray, dim: int) -> np.ndarray:
    """Stack Kronecker-pattern mixing matrices from per-action weights."""
    weights = np.asarray(weights, dtype=float)
    eye = np.eye(dim)
    return np.stack([np.kron(w, eye) for w in weights])


def build_mixed_effect_prior(
    gmm: GmmFit,
    item_vectors: np.ndarray,
    noise_sd: float,
    action_scale: float = 1.0,
    latent_scale: float = 1.0,
) -> MixedEffectPrior:
    """Turn mixture clusters into a mixed-effect hierarchy over items.

    The latent vector stacks the cluster means; its covariance is block
    diagonal in the cluster covariances. Each item's conditional covariance is
    isotropic with scale set by the residual RMS of item vectors around their
    responsibility-weighted cluster mean.
    """
    item_vectors = np.asarray(item_vectors, dtype=float)
    k, d = item_vectors.shape
    weights = gmm.responsibilities
    if weights.shape[0] != k:
        raise ShapeError("responsibilities rows must match item count")
    soft_means = weights @ gmm.means
    residual = item_vectors - soft_means
    noise_var = max(float((residual ** 2).mean()), COV_FLOOR) * action_scale ** 2
    latent_cov = block_diag(*(latent_scale ** 2 * gmm.covariances))
    prior = StructuredPrior(
        latent_mean=gmm.means.ravel(),
        latent_cov=floor_eigenvalues(latent_cov, COV_FLOOR),
        mixing=mixing_from_weights(weights, d),
        action_covs=np.broadcast_to(noise_var * np.eye(d), (k, d, d)).copy(),
        noise_sd=noise_sd,
    )
    return MixedEffectPrior(weights, prior)


def build_nonstructured_prior(item_vectors: np.ndarray, noise_sd: float) -> NonStructuredPrior:
    """Shared empirical prior: mean item vector with per-dimension variances."""
    item_vectors = np.asarray(item_vectors, dtype=float)
    k, d = item_vectors.shape
    mean = item_vectors.mean(axis=0)
    var = np.maximum(item_vectors.var(axis=0), COV_FLOOR)
    return NonStructuredPrior(
        means=np.broadcast_to(mean, (k, d)).copy(),
        covs=np.broadcast_to(np.diag(var), (k, d, d)).copy(),
        noise_sd=noise_sd,
    )


def write_factors(path, ids: np.ndarray, vectors: np.ndarray) -> None:
    """Write ``id,v1,...,vr`` rows for the factor CSV interface."""
    vectors = np.asarray(vectors, dtype=float)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id," + ",".join(f"v{j + 1}" for j in range(vectors.shape[1])) + "\n")
        for ident, row in zip(ids, vectors):
            fh.write(str(int(ident)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def read_factors(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("id,"):
        raise DataError(f"{path}: not a factor CSV")
    ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            ids.append(int(parts[0]))
            rows.append([float(p) for p in parts[1:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return np.asarray(ids), np.asarray(rows)
