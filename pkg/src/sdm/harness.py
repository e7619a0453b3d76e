"""Experiment orchestration: TOML configuration, seeded replications, report
aggregation, and CSV/JSON emission.

Replication r of a run with master seed s derives all randomness from
(s, r, purpose) streams, so every method inside one replication sees the same
environment draw and the same log, and reruns are bit-reproducible. Worker
processes only change scheduling, never results.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import ingest
from .envsim import (
    ContextDistribution,
    FinitePool,
    ProblemInstance,
    ScaledContexts,
    TrueRewardModel,
    UniformCube,
    generate_log,
    make_synthetic_prior,
    perturb_prior,
    sample_instance,
)
from .errors import ConfigError, NumericalError
from .estimators import (
    ActionStructure,
    dm_freq_model,
    dm_value,
    dr_value,
    ips_value,
    mips_value,
    neighbor_order_from_embeddings,
    pc_value,
    snips_value,
)
from .learners import (
    FreqGreedyLearner,
    LogisticFreqGreedyLearner,
    LogisticMarginalGreedyLearner,
    LogisticStructuredGreedyLearner,
    MarginalGreedyLearner,
    OplLearner,
    StructuredGreedyLearner,
    StructuredPessimisticLearner,
    UniformLearner,
)
from .metrics import (
    NOT_APPLICABLE,
    NotApplicableType,
    alpha_radius,
    estimate_moment_ratio,
    explicit_bound,
)
from .policies import EpsilonGreedyPolicy, LinearRewardModel, Policy, UniformPolicy
from .posterior import StructuredPrior, fit_posterior, marginalize_structured

SCENARIOS = ("synthetic_linear", "synthetic_logistic", "ratings")
POLICY_METHODS = (
    "sdm", "dm_bayes", "dm_freq", "ips", "snips", "dr", "mips", "pc",
    "uniform", "pessimistic",
)
ESTIMATOR_METHODS = ("sdm", "dm_bayes", "dm_freq", "ips", "snips", "dr", "mips", "pc")
METRICS = ("bso", "relative_reward", "mse_ope", "bmse", "bounds", "coverage")
SDM_ONLY_METRICS = ("bmse", "bounds", "coverage")

_ENV, _LEARN, _EVAL, _PROBE = 0, 1, 2, 3


@dataclass(frozen=True)
class EstimatorParams:
    ips_clip: float = 0.0
    dr_clip: float = 0.0
    freq_ridge: float = 1.0
    logistic_ridge: float = 1e-4
    mips_clusters: int = 5
    pc_k: int = 5
    opl_steps: int = 2000
    opl_step_size: float = 0.1
    softmax_temperature: float = 1.0
    pessimism_delta: float = 0.1


@dataclass(frozen=True)
class MetricParams:
    n_value_contexts: int = 512
    bmse_action: int = 0
    coverage_delta: float = 0.1
    coverage_mode: str = "bayes"
    coverage_c_norm: float = 1.0
    target_epsilon: float = 0.5
    bound_mass_samples: int = 10_000


@dataclass(frozen=True)
class RatingsParams:
    path: str = ""
    rank: int = 5
    clusters: int = 5
    kuairec_preprocess: bool = False
    prior_subset: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    seed: int
    reps: int
    n_grid: tuple
    methods: tuple
    metrics: tuple
    output_dir: str = "results"
    workers: int = 1
    failure_threshold: int = 0
    noise_sd: float = 1.0
    dim: int = 10
    dim_latent: int = 10
    n_actions: int = 100
    logging_kind: str = "uniform"
    logging_epsilon: float = 0.5
    misspec_level: float | None = None
    misspec_target: str = "prior"
    estimator_params: EstimatorParams = field(default_factory=EstimatorParams)
    metric_params: MetricParams = field(default_factory=MetricParams)
    ratings: RatingsParams = field(default_factory=RatingsParams)


_SCHEMA = {
    "experiment": {
        "scenario", "seed", "reps", "n_grid", "methods", "metrics", "output_dir",
        "workers", "failure_threshold", "noise_sd",
    },
    "dims": {"d", "d_latent", "n_actions"},
    "logging_policy": {"kind", "epsilon"},
    "misspecification": {"level", "target"},
    "estimator_params": set(EstimatorParams.__dataclass_fields__),
    "metric_params": set(MetricParams.__dataclass_fields__),
    "ratings": set(RatingsParams.__dataclass_fields__),
}


def validate_raw_config(raw: dict) -> list[str]:
    """Collect every schema violation; an empty list means the config is valid."""
    errors = []
    if not isinstance(raw, dict):
        return ["config root must be a table"]
    for section in raw:
        if section not in _SCHEMA:
            errors.append(f"unknown section [{section}]")
            continue
        if not isinstance(raw[section], dict):
            errors.append(f"[{section}] must be a table")
            continue
        for key in raw[section]:
            if key not in _SCHEMA[section]:
                errors.append(f"unknown key {section}.{key}")
    exp = raw.get("experiment", {})
    if not isinstance(exp, dict):
        return errors
    scenario = exp.get("scenario")
    if scenario not in SCENARIOS:
        errors.append(f"experiment.scenario must be one of {SCENARIOS}, got {scenario!r}")
    n_grid = exp.get("n_grid")
    if (
        not isinstance(n_grid, list) or not n_grid
        or not all(isinstance(v, int) and v >= 0 for v in n_grid)
        or sorted(n_grid) != n_grid or len(set(n_grid)) != len(n_grid)
    ):
        errors.append("experiment.n_grid must be a non-empty ascending list of ints")
    reps = exp.get("reps", 0)
    if not isinstance(reps, int) or reps < 1:
        errors.append("experiment.reps must be an int >= 1")
    methods = exp.get("methods")
    if not isinstance(methods, list) or not methods:
        errors.append("experiment.methods must be a non-empty list")
        methods = []
    for method in methods:
        if method not in POLICY_METHODS:
            errors.append(f"unknown method {method!r}")
    metrics = exp.get("metrics")
    if not isinstance(metrics, list) or not metrics:
        errors.append("experiment.metrics must be a non-empty list")
        metrics = []
    for metric in metrics:
        if metric not in METRICS:
            errors.append(f"unknown metric {metric!r}")
    if "mse_ope" in metrics:
        for method in methods:
            if method in POLICY_METHODS and method not in ESTIMATOR_METHODS:
                errors.append(f"method {method!r} does not support metric 'mse_ope'")
    for metric in metrics:
        if metric in SDM_ONLY_METRICS and "sdm" not in methods:
            errors.append(f"metric {metric!r} requires method 'sdm'")
        if metric in SDM_ONLY_METRICS and scenario == "synthetic_logistic":
            errors.append(f"metric {metric!r} is defined for linear-Gaussian runs only")
        if metric in ("bmse", "bounds", "coverage") and scenario == "ratings":
            errors.append(f"metric {metric!r} requires a synthetic scenario")
    log_kind = raw.get("logging_policy", {}).get("kind", "uniform")
    if log_kind not in ("uniform", "epsilon_greedy"):
        errors.append(f"logging_policy.kind must be 'uniform' or 'epsilon_greedy', got {log_kind!r}")
    if "bounds" in metrics and log_kind != "uniform":
        errors.append("metric 'bounds' requires the uniform logging policy")
    misspec = raw.get("misspecification", {})
    if isinstance(misspec, dict) and misspec:
        if misspec.get("target", "prior") not in ("prior", "likelihood"):
            errors.append("misspecification.target must be 'prior' or 'likelihood'")
        if "level" in misspec and not isinstance(misspec["level"], (int, float)):
            errors.append("misspecification.level must be a number")
    if scenario == "ratings" and not raw.get("ratings", {}).get("path"):
        errors.append("ratings.path is required for the ratings scenario")
    return errors


def config_from_dict(raw: dict) -> ExperimentConfig:
    errors = validate_raw_config(raw)
    if errors:
        raise ConfigError("; ".join(errors))
    exp = raw["experiment"]
    dims = raw.get("dims", {})
    logging_policy = raw.get("logging_policy", {})
    misspec = raw.get("misspecification", {})
    return ExperimentConfig(
        scenario=exp["scenario"],
        seed=int(exp.get("seed", 0)),
        reps=int(exp["reps"]),
        n_grid=tuple(exp["n_grid"]),
        methods=tuple(exp["methods"]),
        metrics=tuple(exp["metrics"]),
        output_dir=exp.get("output_dir", "results"),
        workers=int(exp.get("workers", 1)),
        failure_threshold=int(exp.get("failure_threshold", 0)),
        noise_sd=float(exp.get("noise_sd", 1.0)),
        dim=int(dims.get("d", 10)),
        dim_latent=int(dims.get("d_latent", 10)),
        n_actions=int(dims.get("n_actions", 100)),
        logging_kind=logging_policy.get("kind", "uniform"),
        logging_epsilon=float(logging_policy.get("epsilon", 0.5)),
        misspec_level=float(misspec["level"]) if "level" in misspec else None,
        misspec_target=misspec.get("target", "prior"),
        estimator_params=EstimatorParams(**raw.get("estimator_params", {})),
        metric_params=MetricParams(**raw.get("metric_params", {})),
        ratings=RatingsParams(**raw.get("ratings", {})),
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ReportRow:
    method: str
    n: int
    metric: str
    mean: float | NotApplicableType
    stderr: float
    reps: int


@dataclass(frozen=True)
class ExperimentReport:
    rows: tuple
    metadata: dict

    def row(self, method: str, n: int, metric: str) -> ReportRow:
        for r in self.rows:
            if (r.method, r.n, r.metric) == (method, n, metric):
                return r
        raise KeyError((method, n, metric))


# --- environment assembly ---------------------------------------------------

@dataclass(frozen=True)
class _Workspace:
    """Everything a replication worker needs, assembled once per run."""

    config: ExperimentConfig
    true_prior: StructuredPrior | None
    learner_prior: StructuredPrior
    fixed_instance: ProblemInstance | None
    env_reward_kind: str
    logistic_learners: bool
    structure: ActionStructure
    logging_policy: Policy
    context_dist: ContextDistribution | None
    probe_x: np.ndarray
    notes: tuple


def _logging_policy(config: ExperimentConfig, learner_prior: StructuredPrior) -> Policy:
    if config.logging_kind == "uniform":
        return UniformPolicy(config.n_actions)
    # Epsilon-greedy around the learner prior's mean rewards: a fixed, data-free
    # scoring rule so the logging policy is identical across replications.
    means = learner_prior.mixing @ learner_prior.latent_mean
    return EpsilonGreedyPolicy(
        LinearRewardModel(means), config.logging_epsilon, config.n_actions
    )


def build_workspace(config: ExperimentConfig) -> _Workspace:
    notes = []
    rng = np.random.default_rng((config.seed, 0xC0FFEE))
    if config.scenario == "ratings":
        matrix = ingest.load_ratings(config.ratings.path)
        if config.ratings.kuairec_preprocess:
            matrix = ingest.preprocess_kuairec(matrix)
            notes.append("ratings preprocessed: clipped at 10 then per-user max-normalized")
        factors = ingest.factorize(matrix, config.ratings.rank, seed=config.seed)
        items = factors.item_factors
        keep = min(config.n_actions, items.shape[0])
        item_subset = rng.permutation(items.shape[0])[:keep]
        items = items[item_subset]
        subset = min(config.ratings.prior_subset, items.shape[0])
        prior_items = items[rng.permutation(items.shape[0])[:subset]]
        gmm = ingest.fit_gmm(prior_items, config.ratings.clusters, seed=config.seed)
        weights = ingest.gmm_responsibilities(gmm, items)
        built = ingest.build_mixed_effect_prior(
            ingest.GmmFit(gmm.means, gmm.covariances, gmm.weights, weights,
                          gmm.log_likelihoods),
            items, config.noise_sd,
        )
        notes.append(
            f"mixed-effect prior: clusters fit on {subset} held-out item vectors; "
            "latent covariance block-diagonal from cluster covariances"
        )
        instance = ProblemInstance(
            theta=items, psi=gmm.means.ravel(), reward_kind="linear_gaussian",
            contexts=FinitePool(factors.user_factors),
        )
        true_prior = None
        learner_prior = built.prior
        embeddings = items
        config = _replace_dims(config, items.shape[1], built.prior.dim_latent, keep)
    else:
        true_prior = make_synthetic_prior(
            config.dim, config.dim_latent, config.n_actions, config.noise_sd, rng
        )
        learner_prior = true_prior
        instance = None
        embeddings = true_prior.mixing @ true_prior.latent_mean

    env_reward_kind = "linear_gaussian"
    logistic_learners = config.scenario == "synthetic_logistic"
    if logistic_learners:
        env_reward_kind = "bernoulli_logistic"
    if config.misspec_level is not None:
        if config.misspec_target == "prior":
            learner_prior = perturb_prior(
                learner_prior, config.misspec_level, np.random.default_rng((config.seed, 0xBAD))
            )
            notes.append(
                f"prior misspecification level {config.misspec_level}: uniform noise added "
                "entrywise; covariances re-symmetrized and eigenvalue-floored at 1e-6"
            )
        else:
            env_reward_kind = "bernoulli_logistic"
            notes.append(
                "likelihood misspecification: environment draws Bernoulli-logistic rewards "
                "while learners keep the linear-Gaussian model"
            )

    cluster_count = min(config.estimator_params.mips_clusters, config.n_actions)
    gmm_emb = ingest.fit_gmm(embeddings, cluster_count, seed=config.seed)
    clusters = np.argmax(gmm_emb.responsibilities, axis=1)
    # Re-label clusters contiguously in case some component got no members.
    _, clusters = np.unique(clusters, return_inverse=True)
    structure = ActionStructure(clusters, neighbor_order_from_embeddings(embeddings))

    context_dist = None
    if "bounds" in config.metrics and instance is None:
        # Bound-validation runs rescale contexts to unit norm; plain metric
        # runs keep the raw cube.
        context_dist = ScaledContexts(UniformCube(config.dim), 1.0 / math.sqrt(config.dim))
        notes.append("bound-validation run: contexts rescaled by 1/sqrt(d) to unit norm")

    logging_policy = _logging_policy(config, learner_prior)
    probe_rng = np.random.default_rng((config.seed, _PROBE))
    if instance is not None:
        probe_x = instance.contexts.sample(1, probe_rng)[0]
    elif context_dist is not None:
        probe_x = context_dist.sample(1, probe_rng)[0]
    else:
        probe_x = UniformCube(config.dim).sample(1, probe_rng)[0]
    return _Workspace(
        config=config,
        true_prior=true_prior,
        learner_prior=learner_prior,
        fixed_instance=instance,
        env_reward_kind=env_reward_kind,
        logistic_learners=logistic_learners,
        structure=structure,
        logging_policy=logging_policy,
        context_dist=context_dist,
        probe_x=probe_x,
        notes=tuple(notes),
    )


def _replace_dims(config: ExperimentConfig, dim, dim_latent, n_actions) -> ExperimentConfig:
    raw = asdict(config)
    raw.update(dim=dim, dim_latent=dim_latent, n_actions=n_actions)
    raw["estimator_params"] = EstimatorParams(**raw["estimator_params"])
    raw["metric_params"] = MetricParams(**raw["metric_params"])
    raw["ratings"] = RatingsParams(**raw["ratings"])
    raw["n_grid"] = tuple(raw["n_grid"])
    raw["methods"] = tuple(raw["methods"])
    raw["metrics"] = tuple(raw["metrics"])
    return ExperimentConfig(**raw)


def _make_learner(method: str, ws: _Workspace):
    cfg = ws.config
    params = cfg.estimator_params
    if method == "sdm":
        if ws.logistic_learners:
            return LogisticStructuredGreedyLearner(ws.learner_prior, params.logistic_ridge)
        return StructuredGreedyLearner(ws.learner_prior)
    if method == "dm_bayes":
        if ws.logistic_learners:
            return LogisticMarginalGreedyLearner(ws.learner_prior, params.logistic_ridge)
        return MarginalGreedyLearner(ws.learner_prior)
    if method == "dm_freq":
        if ws.logistic_learners:
            return LogisticFreqGreedyLearner(cfg.n_actions, params.logistic_ridge)
        return FreqGreedyLearner(cfg.n_actions, params.freq_ridge)
    if method == "uniform":
        return UniformLearner(cfg.n_actions)
    if method == "pessimistic":
        return StructuredPessimisticLearner(ws.learner_prior, params.pessimism_delta)
    if method in ("ips", "snips", "dr", "mips", "pc"):
        return OplLearner(
            method,
            steps=params.opl_steps,
            step_size=params.opl_step_size,
            temperature=params.softmax_temperature,
            clip=params.ips_clip if method == "ips" else params.dr_clip,
            freq_ridge=params.freq_ridge,
            structure=ws.structure if method in ("mips", "pc") else None,
            k=min(params.pc_k, cfg.n_actions) if method == "pc" else None,
            logging_policy=ws.logging_policy if method in ("mips", "pc") else None,
        )
    raise ConfigError(f"unknown method {method!r}")


def _estimate_target_value(method: str, ws: _Workspace, target, log, learner):
    cfg = ws.config
    params = cfg.estimator_params
    if method in ("sdm", "dm_bayes", "dm_freq"):
        return dm_value(target, log, learner.reward_model(log)).value
    if method == "ips":
        return ips_value(target, log, params.ips_clip).value
    if method == "snips":
        return snips_value(target, log).value
    if method == "dr":
        return dr_value(target, log, dm_freq_model(log, params.freq_ridge), params.dr_clip).value
    if method == "mips":
        return mips_value(target, log, ws.structure, ws.logging_policy).value
    if method == "pc":
        k = min(params.pc_k, cfg.n_actions)
        return pc_value(target, log, ws.structure, k, ws.logging_policy).value
    raise ConfigError(f"method {method!r} does not support mse_ope")


def _run_replication(ws: _Workspace, rep: int):
    """One replication: every (method, n, metric) value plus failures and skips."""
    cfg = ws.config
    seed = cfg.seed
    env_rng = np.random.default_rng((seed, rep, _ENV))
    if ws.fixed_instance is not None:
        instance = ws.fixed_instance
    else:
        instance = sample_instance(
            ws.true_prior, ws.env_reward_kind, env_rng, ws.context_dist
        )
    max_n = max(cfg.n_grid)
    full_log = generate_log(instance, ws.logging_policy, max_n, cfg.noise_sd, env_rng)

    eval_rng = np.random.default_rng((seed, rep, _EVAL))
    pool = instance.contexts.exact_points()
    eval_x = pool if pool is not None else instance.contexts.sample(
        cfg.metric_params.n_value_contexts, eval_rng
    )
    rewards = instance.reward_matrix(eval_x)
    optimal_value = float(rewards.max(axis=1).mean())
    target_policy = EpsilonGreedyPolicy(
        TrueRewardModel(instance), cfg.metric_params.target_epsilon, cfg.n_actions
    )
    target_true = float((target_policy.probs_batch(eval_x) * rewards).sum(axis=1).mean())

    values: dict = {}
    failures: list = []
    skips: list = []
    for n in cfg.n_grid:
        log = full_log.take(n)
        for method in cfg.methods:
            try:
                learner = _make_learner(method, ws)
                wants_policy = any(m in cfg.metrics for m in ("bso", "relative_reward"))
                if wants_policy:
                    policy = learner(log, instance)
                    achieved = float((policy.probs_batch(eval_x) * rewards).sum(axis=1).mean())
                    if "bso" in cfg.metrics:
                        values[(method, n, "bso")] = optimal_value - achieved
                    if "relative_reward" in cfg.metrics:
                        if abs(optimal_value) < 1e-9:
                            skips.append((rep, method, n, "relative_reward",
                                          "optimal value numerically zero"))
                        else:
                            values[(method, n, "relative_reward")] = achieved / optimal_value
                if "mse_ope" in cfg.metrics and method in ESTIMATOR_METHODS:
                    estimate = _estimate_target_value(method, ws, target_policy, log, learner)
                    values[(method, n, "mse_ope")] = (estimate - target_true) ** 2
            except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
                failures.append((rep, method, n, "fit", str(exc)))

        if "sdm" in cfg.methods and not ws.logistic_learners:
            try:
                values.update(_sdm_probe_metrics(ws, instance, log, eval_x, rewards, n))
            except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
                failures.append((rep, "sdm", n, "probe", str(exc)))
    return rep, values, failures, skips


def _sdm_probe_metrics(ws, instance, log, eval_x, rewards, n):
    cfg = ws.config
    out = {}
    needs_post = any(m in cfg.metrics for m in ("bmse", "bounds", "coverage"))
    if not needs_post:
        return out
    post = fit_posterior(ws.learner_prior, log)
    probe_x = ws.probe_x
    probe_a = cfg.metric_params.bmse_action
    if "bmse" in cfg.metrics:
        err = float(probe_x @ post.means[probe_a]) - instance.mean_reward(probe_x, probe_a)
        out[("sdm", n, "bmse")] = err * err
    if "bounds" in cfg.metrics:
        best = np.argmax(rewards, axis=1)
        quad = np.einsum("ni,nij,nj->n", eval_x, post.covs[best], eval_x)
        out[("sdm", n, "covariance_bound")] = (
            2.0 * math.sqrt(instance.dim) * float(np.sqrt(np.maximum(quad, 0.0)).mean())
        )
    if "coverage" in cfg.metrics:
        delta = cfg.metric_params.coverage_delta
        scale = alpha_radius(instance.dim, delta)
        if cfg.metric_params.coverage_mode == "freq":
            marg = marginalize_structured(ws.learner_prior)
            lam = float(np.linalg.eigvalsh(marg.covs[probe_a])[0])
            scale += (
                cfg.metric_params.coverage_c_norm
                + float(np.linalg.norm(post.means[probe_a]))
            ) / math.sqrt(lam)
        center = float(probe_x @ post.means[probe_a])
        width = scale * math.sqrt(max(float(probe_x @ post.covs[probe_a] @ probe_x), 0.0))
        truth = instance.mean_reward(probe_x, probe_a)
        out[("sdm", n, "coverage")] = 1.0 if abs(truth - center) <= width else 0.0
    return out


def _explicit_bound_rows(ws: _Workspace) -> tuple[list[ReportRow], list[str]]:
    """Deterministic explicit-bound rows, one per n (uniform logging only)."""
    cfg = ws.config
    if cfg.logging_kind != "uniform" or ws.fixed_instance is not None:
        return [], []
    contexts = ws.context_dist if ws.context_dist is not None else UniformCube(cfg.dim)
    rng = np.random.default_rng((cfg.seed, 0xB0))
    h = estimate_moment_ratio(contexts, rng, n_vectors=2000, n_samples=50_000)
    masses = np.full(cfg.metric_params.bound_mass_samples, 1.0 / cfg.n_actions)
    # Smallest eigenvalue of E[x x^T]: 1/3 for the raw cube, 1/(3d) rescaled.
    g = 1.0 / 3.0 if ws.context_dist is None else 1.0 / (3.0 * cfg.dim)
    sigma0 = float(np.sqrt(np.linalg.eigvalsh(ws.learner_prior.action_covs[0])[-1]))
    tau = float(np.sqrt(np.linalg.eigvalsh(ws.learner_prior.latent_cov)[-1]))
    rows = []
    for n in cfg.n_grid:
        if n < 1:
            rows.append(ReportRow("sdm", n, "explicit_bound", NOT_APPLICABLE, 0.0, 1))
            continue
        value = explicit_bound(n, cfg.dim, g, h, cfg.noise_sd, sigma0, tau, masses)
        rows.append(ReportRow("sdm", n, "explicit_bound", value, 0.0, 1))
    return rows, [f"explicit bound moment-ratio constant h = {h:.4f} (safety factor 1.1)"]


def run(config: ExperimentConfig) -> ExperimentReport:
    """Execute every replication and aggregate one row per (method, n, metric)."""
    start = time.time()
    ws = build_workspace(config)
    config = ws.config  # ratings scenario may have rewritten the dims

    results = {}
    failures = []
    skips = []
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outputs = list(pool.map(_replication_task, [(ws, rep) for rep in range(config.reps)]))
    else:
        outputs = [_run_replication(ws, rep) for rep in range(config.reps)]
    for rep, values, rep_failures, rep_skips in sorted(outputs, key=lambda t: t[0]):
        failures.extend(rep_failures)
        skips.extend(rep_skips)
        for key, value in values.items():
            results.setdefault(key, []).append(value)

    rows = []
    for (method, n, metric), vals in results.items():
        arr = np.asarray(vals, dtype=float)
        mean = float(math.fsum(arr) / arr.size)
        stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        rows.append(ReportRow(method, int(n), metric, mean, stderr, int(arr.size)))
    notes = list(ws.notes)
    if "bounds" in config.metrics and "sdm" in config.methods and not ws.logistic_learners:
        bound_rows, bound_notes = _explicit_bound_rows(ws)
        rows.extend(bound_rows)
        notes.extend(bound_notes)
    rows.sort(key=lambda r: (r.method, r.n, r.metric))

    metadata = {
        "config_hash": config_hash(config),
        "seed": config.seed,
        "scenario": config.scenario,
        "reps": config.reps,
        "wall_time_s": round(time.time() - start, 3),
        "failures": [list(f) for f in failures],
        "failure_count": len(failures),
        "skips": [list(s) for s in skips],
        "notes": notes,
    }
    return ExperimentReport(tuple(rows), metadata)


def _replication_task(payload):
    ws, rep = payload
    return _run_replication(ws, rep)


# --- emission ----------------------------------------------------------------

def _format_mean(value) -> str:
    if isinstance(value, NotApplicableType):
        return "NotApplicable"
    return repr(float(value))


def report_to_csv(report: ExperimentReport) -> str:
    lines = ["method,n,metric,mean,stderr,reps"]
    for row in report.rows:
        lines.append(
            f"{row.method},{row.n},{row.metric},{_format_mean(row.mean)},"
            f"{repr(float(row.stderr))},{row.reps}"
        )
    return "\n".join(lines) + "\n"


def report_to_json(report: ExperimentReport) -> str:
    payload = {
        "metadata": report.metadata,
        "rows": [
            {
                "method": row.method,
                "n": row.n,
                "metric": row.metric,
                "mean": "NotApplicable" if isinstance(row.mean, NotApplicableType) else row.mean,
                "stderr": row.stderr,
                "reps": row.reps,
            }
            for row in report.rows
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def load_report_json(path) -> ExperimentReport:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    rows = tuple(
        ReportRow(
            r["method"], int(r["n"]), r["metric"],
            NOT_APPLICABLE if r["mean"] == "NotApplicable" else float(r["mean"]),
            float(r["stderr"]), int(r["reps"]),
        )
        for r in payload["rows"]
    )
    return ExperimentReport(rows, payload["metadata"])


def emit(report: ExperimentReport, out_dir, formats=("csv", "json")) -> list[str]:
    """Write the report; returns the created file paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "csv" in formats:
        path = os.path.join(out_dir, "report.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report_to_csv(report))
        written.append(path)
    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report_to_json(report))
        written.append(path)
    return written
