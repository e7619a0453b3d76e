"""Acceptance suite: one test per release criterion, each printing a
pass/fail line with its runtime (run with ``pytest -s`` to see them live).

Statistical criteria run at fixed seeds, so outcomes are reproducible.
"""
import math
import time

import numpy as np

from _oracles import joint_gaussian_oracle, random_logged_data, random_structured_prior
from sdm.envsim import (
    ScaledContexts,
    UniformCube,
    make_isotropic_prior,
    make_synthetic_prior,
)
from sdm.estimators import (
    ActionStructure,
    ips_value,
    mips_value,
    neighbor_order_from_embeddings,
    opl_value_and_gradient,
    pc_value,
    snips_value,
)
from sdm.learners import (
    MarginalGreedyLearner,
    StructuredGreedyLearner,
    StructuredPessimisticLearner,
    UniformLearner,
)
from sdm.logistic import loglik_gradient
from sdm.metrics import (
    NOT_APPLICABLE,
    ci_coverage,
    covariance_bound,
    estimate_moment_ratio,
    explicit_bound,
    mc_bmse,
    mc_bso,
    mc_reward_uncertainty,
    relative_reward,
)
from sdm.policies import SoftmaxPolicy, UniformPolicy
from sdm.posterior import LoggedDataset, fit_posterior


def _report(num, desc, limit_s, elapsed, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[criterion {num:2d}] {status} in {elapsed:6.1f}s (limit {limit_s:.0f}s) "
          f"{desc}{': ' + detail if detail else ''}")
    assert ok, f"criterion {num} failed: {desc} {detail}"
    assert elapsed < limit_s, f"criterion {num} exceeded runtime limit ({elapsed:.1f}s)"


def _paired_se(a, b):
    diff = np.asarray(a.values) - np.asarray(b.values)
    return float(diff.std(ddof=1) / np.sqrt(diff.size))


def _check_covariances(covs, where):
    for c in covs:
        assert np.max(np.abs(c - c.T)) <= 1e-10, f"asymmetric covariance in {where}"
        assert np.linalg.eigvalsh(c)[0] > 0, f"non-PD covariance in {where}"


def test_criterion_1_posterior_oracle_equivalence():
    start = time.time()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng((1000, seed))
        d = int(rng.integers(1, 5))
        dl = int(rng.integers(1, 4))
        k = int(rng.integers(1, 6))
        n = int(rng.integers(0, 51))
        prior = random_structured_prior(rng, d, dl, k, noise_sd=float(rng.uniform(0.5, 1.5)))
        data = random_logged_data(rng, n, d, k)
        post = fit_posterior(prior, data)
        means, covs, lat_mean, lat_cov = joint_gaussian_oracle(prior, data)
        worst = max(
            worst,
            float(np.max(np.abs(post.means - means))),
            float(np.max(np.abs(post.covs - covs))),
            float(np.max(np.abs(post.latent_mean - lat_mean))),
            float(np.max(np.abs(post.latent_cov - lat_cov))),
        )
        _check_covariances(post.covs, f"criterion 1 seed {seed}")
        _check_covariances([post.latent_cov], f"criterion 1 seed {seed}")
    elapsed = time.time() - start
    _report(1, "closed form matches joint-Gaussian conditioning oracle", 30,
            elapsed, worst <= 1e-8, f"max deviation {worst:.2e} over 100 instances")


def test_criterion_2_bmse_identity():
    start = time.time()
    d, dl, k, n, reps = 3, 2, 5, 50, 2000
    prior = random_structured_prior(np.random.default_rng(2001), d, dl, k)
    probe_rng = np.random.default_rng(2002)
    logging = UniformPolicy(k)
    worst_ratio = 0.0
    for probe in range(20):
        x = probe_rng.uniform(-1.0, 1.0, size=d)
        a = probe % k
        bmse = mc_bmse(prior, x, a, logging, n, reps, np.random.default_rng((2003, probe)))
        unc = mc_reward_uncertainty(prior, x, a, logging, n, reps,
                                    np.random.default_rng((2003, probe)))
        combined = math.hypot(bmse.std_error, unc.std_error)
        worst_ratio = max(worst_ratio, abs(bmse.mean - unc.mean) / combined)
    elapsed = time.time() - start
    _report(2, "BMSE equals mean posterior quadratic form at 20 probes", 300,
            elapsed, worst_ratio <= 3.0, f"worst deviation {worst_ratio:.2f} combined SEs")


def test_criterion_3_covariance_bound_grid():
    start = time.time()
    details = []
    ok = True
    for k in (5, 50):
        prior = make_synthetic_prior(5, 5, k, rng=np.random.default_rng((3000, k)))
        for n in (10, 100, 1000):
            seed = np.random.default_rng((3001, k, n))
            bso = mc_bso(prior, StructuredGreedyLearner(prior), UniformPolicy(k), n, 500,
                         np.random.default_rng((3002, k, n)))
            bound = covariance_bound(prior, UniformPolicy(k), n, 500,
                                     np.random.default_rng((3002, k, n)))
            combined = math.hypot(bso.std_error, bound.std_error)
            cell_ok = bso.mean <= bound.mean + 3 * combined
            ok = ok and cell_ok
            details.append(f"K={k},n={n}:{bso.mean:.3f}<={bound.mean:.3f}")
    elapsed = time.time() - start
    _report(3, "suboptimality below covariance bound on the (n, K) grid", 600,
            elapsed, ok, "; ".join(details))


def test_criterion_4_greedy_optimality():
    start = time.time()
    k = 100
    prior = make_synthetic_prior(10, 10, k, rng=np.random.default_rng(4000))
    logging = UniformPolicy(k)
    greedy = mc_bso(prior, StructuredGreedyLearner(prior), logging, 100, 500,
                    np.random.default_rng(4001))
    ok = True
    details = [f"greedy={greedy.mean:.4f}"]
    for name, learner in (
        ("pessimistic", StructuredPessimisticLearner(prior, 0.1)),
        ("uniform", UniformLearner(k)),
    ):
        other = mc_bso(prior, learner, logging, 100, 500, np.random.default_rng(4001))
        pse = _paired_se(greedy, other)
        ok = ok and greedy.mean <= other.mean + 3 * pse
        details.append(f"{name}={other.mean:.4f}")
    elapsed = time.time() - start
    _report(4, "greedy suboptimality at or below pessimistic and uniform", 600,
            elapsed, ok, ", ".join(details))


def test_criterion_5_bayes_coverage():
    start = time.time()
    prior = random_structured_prior(np.random.default_rng(5000), 3, 2, 5)
    logging = UniformPolicy(5)
    ok = True
    details = []
    for delta in (0.1, 0.5):
        report = ci_coverage(prior, logging, 40, delta, "bayes", 2000,
                             np.random.default_rng((5001, int(delta * 10))))
        se = math.sqrt(max(report.mean * (1 - report.mean), 1e-12) / report.replications)
        ok = ok and report.mean >= (1 - delta) - 3 * se
        details.append(f"delta={delta}: coverage={report.mean:.3f}")
    elapsed = time.time() - start
    _report(5, "credible-interval coverage meets its nominal level", 180,
            elapsed, ok, ", ".join(details))


def test_criterion_6_explicit_bound():
    start = time.time()
    d, k = 3, 5
    prior = make_isotropic_prior(d, k, latent_sd=math.sqrt(3.0), action_sd=1.0,
                                 noise_sd=1.0, rng=np.random.default_rng(6000))
    contexts = ScaledContexts(UniformCube(d), 1.0 / math.sqrt(d))
    h = estimate_moment_ratio(contexts, np.random.default_rng(6001),
                              n_vectors=10_000, n_samples=100_000)
    g = 1.0 / (3.0 * d)
    masses = np.full(100_000, 1.0 / k)
    bound = explicit_bound(100_000, d, g, h, 1.0, 1.0, math.sqrt(3.0), masses)
    below = explicit_bound(2000, d, g, h, 1.0, 1.0, math.sqrt(3.0), masses)
    bso = mc_bso(prior, StructuredGreedyLearner(prior), UniformPolicy(k), 2000, 300,
                 np.random.default_rng(6002), contexts=contexts)
    applicable = isinstance(bound, float)
    dominates = applicable and bound >= bso.mean - 3 * bso.std_error
    not_applicable_below = below is NOT_APPLICABLE
    elapsed = time.time() - start
    _report(6, "explicit bound dominates suboptimality and gates on applicability", 300,
            elapsed, applicable and dominates and not_applicable_below,
            f"h={h:.3f}, bound={bound if applicable else bound!r}, "
            f"bso={bso.mean:.4f}+-{bso.std_error:.4f}, below-threshold={below!r}")


def test_criterion_7_baseline_collapse_identities():
    start = time.time()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng((7000, seed))
        k = int(rng.integers(2, 8))
        d = int(rng.integers(1, 4))
        n = int(rng.integers(5, 60))
        logging = SoftmaxPolicy(rng.normal(size=(k, d)))
        x = rng.normal(size=(n, d))
        probs = logging.probs_batch(x)
        actions = np.array([rng.choice(k, p=p / p.sum()) for p in probs])
        data = LoggedDataset(x, actions, rng.normal(size=n),
                             probs[np.arange(n), actions], k)
        structure = ActionStructure(
            np.arange(k), neighbor_order_from_embeddings(np.arange(k, dtype=float)[:, None])
        )
        mean_r = data.rewards.mean()
        for est in (
            ips_value(logging, data, clip=0.0),
            snips_value(logging, data),
            mips_value(logging, data, structure, logging),
            pc_value(logging, data, structure, 1, logging),
        ):
            worst = max(worst, abs(est.value - mean_r))
    elapsed = time.time() - start
    _report(7, "importance estimators collapse to the mean reward when target equals logging",
            10, elapsed, worst <= 1e-12, f"worst deviation {worst:.2e}")


def test_criterion_8_structured_gain_grows_with_actions():
    start = time.time()
    gaps = {}
    pses = {}
    for k in (10, 100):
        prior = make_synthetic_prior(10, 10, k, rng=np.random.default_rng((8000, k)))
        logging = UniformPolicy(k)
        sdm = relative_reward(prior, StructuredGreedyLearner(prior), logging, 100, 50,
                              np.random.default_rng((8001, k)))
        bayes = relative_reward(prior, MarginalGreedyLearner(prior), logging, 100, 50,
                                np.random.default_rng((8001, k)))
        gaps[k] = sdm.mean - bayes.mean
        pses[k] = _paired_se(sdm, bayes)
    significant = gaps[100] > 2 * pses[100]
    widens = gaps[100] > gaps[10]
    elapsed = time.time() - start
    _report(8, "structured gain over the independent prior grows with the action count", 900,
            elapsed, significant and widens,
            f"gap(K=100)={gaps[100]:.4f} (paired SE {pses[100]:.4f}), gap(K=10)={gaps[10]:.4f}")


def test_criterion_9_logistic_misspecification_robustness():
    start = time.time()
    k = 50
    prior = make_synthetic_prior(10, 10, k, rng=np.random.default_rng(9000))
    logging = UniformPolicy(k)
    sdm = relative_reward(prior, StructuredGreedyLearner(prior), logging, 500, 50,
                          np.random.default_rng(9001), reward_kind="bernoulli_logistic")
    bayes = relative_reward(prior, MarginalGreedyLearner(prior), logging, 500, 50,
                            np.random.default_rng(9001), reward_kind="bernoulli_logistic")
    pse = _paired_se(sdm, bayes)
    ok = sdm.mean >= bayes.mean - pse
    elapsed = time.time() - start
    _report(9, "structured learner stays competitive under binary-reward misspecification",
            600, elapsed, ok,
            f"sdm={sdm.mean:.4f}, dm_bayes={bayes.mean:.4f}, paired SE={pse:.4f}")


def test_criterion_10_numerical_hygiene():
    start = time.time()
    rng = np.random.default_rng(10_000)
    k, d = 3, 2
    data = random_logged_data(rng, 25, d, k)
    worst_opl = 0.0
    estimators = ("ips", "snips", "dr", "mips", "pc")
    structure = ActionStructure(
        np.array([0, 0, 1]), neighbor_order_from_embeddings(np.arange(k, dtype=float)[:, None])
    )
    from sdm.estimators import dm_freq_model

    for point in range(20):
        est = estimators[point % len(estimators)]
        kwargs = {}
        if est == "dr":
            kwargs = {"model": dm_freq_model(data, 1.0), "clip": 0.05}
        elif est in ("mips", "pc"):
            kwargs = {"structure": structure, "logging_policy": UniformPolicy(k)}
            if est == "pc":
                kwargs["k"] = 2
        params = np.random.default_rng((10_001, point)).normal(size=(k, d))
        _, grad = opl_value_and_gradient(est, data, params, 1.1, **kwargs)
        h = 1e-6
        fd = np.zeros_like(params)
        for i in range(k):
            for j in range(d):
                bump = np.zeros_like(params)
                bump[i, j] = h
                up, _ = opl_value_and_gradient(est, data, params + bump, 1.1, **kwargs)
                dn, _ = opl_value_and_gradient(est, data, params - bump, 1.1, **kwargs)
                fd[i, j] = (up - dn) / (2 * h)
        worst_opl = max(worst_opl,
                        np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))

    x = rng.uniform(-1, 1, size=(60, 3))
    r = (rng.uniform(size=60) < 0.5).astype(float)
    ridge = 1e-4

    def objective(theta):
        logits = x @ theta
        ll = -(np.logaddexp(0.0, -logits) @ r) - (np.logaddexp(0.0, logits) @ (1 - r))
        return ll - 0.5 * ridge * theta @ theta

    worst_logistic = 0.0
    for point in range(20):
        theta = np.random.default_rng((10_002, point)).normal(size=3)
        grad = loglik_gradient(theta, x, r, ridge)
        h = 1e-5
        fd = np.zeros(3)
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            fd[j] = (objective(theta + e) - objective(theta - e)) / (2 * h)
        worst_logistic = max(worst_logistic,
                             np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))

    # Posterior covariance hygiene on a fresh batch of random problems.
    for seed in range(10):
        check_rng = np.random.default_rng((10_003, seed))
        prior = random_structured_prior(check_rng, 3, 2, 4)
        post = fit_posterior(prior, random_logged_data(check_rng, 30, 3, 4))
        _check_covariances(post.covs, "criterion 10")
        _check_covariances(post.cond_covs, "criterion 10")
        _check_covariances([post.latent_cov], "criterion 10")

    ok = worst_opl <= 1e-4 and worst_logistic <= 1e-4
    elapsed = time.time() - start
    _report(10, "analytic gradients match finite differences; covariances stay symmetric PD",
            120, elapsed, ok,
            f"worst opl rel err {worst_opl:.2e}, worst logistic rel err {worst_logistic:.2e}")
