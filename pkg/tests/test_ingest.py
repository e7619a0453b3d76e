import numpy as np
import pytest

from sdm.errors import DataError
from sdm.ingest import (
    GmmFit,
    RatingsMatrix,
    build_mixed_effect_prior,
    build_nonstructured_prior,
    factorize,
    fit_gmm,
    load_ratings,
    mixing_from_weights,
    preprocess_kuairec,
    read_factors,
    write_factors,
)
from sdm.posterior import (
    LoggedDataset,
    fit_posterior,
    marginalize_structured,
)


class TestLoadRatings:
    def test_hand_csv_exact(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("user_id,item_id,value\n0,0,1.5\n0,1,2.0\n1,0,-0.5\n1,1,3.25\n")
        m = load_ratings(path)
        np.testing.assert_array_equal(m.values, [[1.5, 2.0], [-0.5, 3.25]])
        assert m.mask.all()
        np.testing.assert_array_equal(m.user_ids, [0, 1])

    def test_sparse_ids_are_compacted(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("user_id,item_id,value\n10,7,1.0\n20,9,2.0\n")
        m = load_ratings(path)
        assert m.values.shape == (2, 2)
        assert m.mask.sum() == 2
        np.testing.assert_array_equal(m.item_ids, [7, 9])

    def test_empty_file_errors(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("")
        with pytest.raises(DataError, match="empty"):
            load_ratings(path)

    def test_header_only_errors(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("user_id,item_id,value\n")
        with pytest.raises(DataError, match="no rating rows"):
            load_ratings(path)

    def test_nan_token_errors_with_line(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("user_id,item_id,value\n0,0,1.0\n0,1,nan\n")
        with pytest.raises(DataError, match=":3"):
            load_ratings(path)

    def test_malformed_row_errors_with_line(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("user_id,item_id,value\n0,0\n")
        with pytest.raises(DataError, match=":2"):
            load_ratings(path)

    def test_duplicate_entry_rejected(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("user_id,item_id,value\n0,0,1.0\n0,0,2.0\n")
        with pytest.raises(DataError, match="duplicate"):
            load_ratings(path)


class TestPreprocess:
    def test_all_zero_user_left_alone(self):
        m = RatingsMatrix.from_dense(np.array([[0.0, 0.0], [2.0, 4.0]]))
        out = preprocess_kuairec(m)
        np.testing.assert_array_equal(out.values[0], [0.0, 0.0])

    def test_clip_then_normalize(self):
        m = RatingsMatrix.from_dense(np.array([[15.0]]))
        out = preprocess_kuairec(m, clip_max=10.0)
        assert out.values[0, 0] == pytest.approx(1.0)

    def test_row_scaled_by_max(self):
        m = RatingsMatrix.from_dense(np.array([[2.0, 4.0]]))
        out = preprocess_kuairec(m)
        np.testing.assert_allclose(out.values[0], [0.5, 1.0])

    def test_unobserved_entries_ignored_for_max(self):
        values = np.array([[2.0, 100.0]])
        mask = np.array([[True, False]])
        out = preprocess_kuairec(RatingsMatrix(values, mask, np.arange(1), np.arange(2)))
        assert out.values[0, 0] == pytest.approx(1.0)
        assert not out.mask[0, 1]


class TestFactorize:
    def test_exact_rank_one_matrix_recovered(self):
        rng = np.random.default_rng(130)
        u = rng.normal(size=6)
        v = rng.normal(size=5)
        m = RatingsMatrix.from_dense(np.outer(u, v))
        fac = factorize(m, rank=1, iterations=200, reg=1e-9, tol=0.0)
        rmse = np.sqrt(((fac.reconstruction() - m.values) ** 2).mean())
        assert rmse < 1e-6

    def test_full_rank_full_observation(self):
        rng = np.random.default_rng(131)
        vals = rng.normal(size=(4, 4))
        fac = factorize(RatingsMatrix.from_dense(vals), rank=4, iterations=400,
                        reg=1e-10, tol=0.0)
        rmse = np.sqrt(((fac.reconstruction() - vals) ** 2).mean())
        assert rmse < 1e-4

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(132)
        vals = rng.normal(size=(8, 6))
        mask = rng.uniform(size=vals.shape) < 0.6
        mask[0] = True  # keep at least one fully observed row
        fac = factorize(RatingsMatrix(vals, mask, np.arange(8), np.arange(6)),
                        rank=2, iterations=30, reg=0.05)
        diffs = np.diff(fac.objectives)
        assert np.all(diffs <= 1e-9)

    def test_masked_entries_do_not_leak(self):
        vals = np.array([[1.0, 999.0], [1.0, 1.0]])
        mask = np.array([[True, False], [True, True]])
        fac = factorize(RatingsMatrix(vals, mask, np.arange(2), np.arange(2)),
                        rank=1, iterations=50, reg=1e-6)
        assert abs(fac.reconstruction()[0, 1]) < 10.0


class TestPreprocessFactorizePipeline:
    def test_reconstruction_stays_near_preprocessed_range(self):
        rng = np.random.default_rng(145)
        raw = RatingsMatrix.from_dense(rng.uniform(0.0, 15.0, size=(10, 8)))
        normalized = preprocess_kuairec(raw)
        assert normalized.values.min() >= 0.0 and normalized.values.max() <= 1.0
        fac = factorize(normalized, rank=4, iterations=100, reg=1e-3)
        recon = fac.reconstruction()
        assert recon.min() > -0.25 and recon.max() < 1.25


class TestGmm:
    def test_single_component_matches_sample_moments(self):
        rng = np.random.default_rng(133)
        data = rng.normal(size=(200, 3)) @ np.diag([1.0, 2.0, 0.5]) + [1.0, -1.0, 0.0]
        fit = fit_gmm(data, 1, iterations=20, seed=0)
        np.testing.assert_allclose(fit.means[0], data.mean(axis=0), atol=1e-8)
        np.testing.assert_allclose(fit.covariances[0], np.cov(data.T, bias=True), atol=1e-8)

    def test_two_separated_blobs(self):
        rng = np.random.default_rng(134)
        blob_a = rng.normal(size=(100, 2)) * 0.1 + [5.0, 5.0]
        blob_b = rng.normal(size=(100, 2)) * 0.1 - [5.0, 5.0]
        data = np.vstack([blob_a, blob_b])
        fit = fit_gmm(data, 2, iterations=50, seed=1)
        own = fit.responsibilities.max(axis=1)
        assert np.all(own >= 0.99)

    def test_log_likelihood_monotone(self):
        rng = np.random.default_rng(135)
        data = rng.normal(size=(80, 2))
        fit = fit_gmm(data, 3, iterations=40, seed=2)
        diffs = np.diff(fit.log_likelihoods)
        assert np.all(diffs >= -1e-9)

    def test_responsibilities_normalize(self):
        rng = np.random.default_rng(136)
        data = rng.normal(size=(50, 2))
        fit = fit_gmm(data, 4, iterations=15, seed=3)
        np.testing.assert_allclose(fit.responsibilities.sum(axis=1), 1.0, atol=1e-9)


class TestMixedEffectPrior:
    def _gmm(self, means, covs, resp):
        return GmmFit(
            means=np.asarray(means, dtype=float),
            covariances=np.asarray(covs, dtype=float),
            weights=np.full(len(means), 1.0 / len(means)),
            responsibilities=np.asarray(resp, dtype=float),
            log_likelihoods=(0.0,),
        )

    def test_single_effect_gives_identity_mixing(self):
        rng = np.random.default_rng(137)
        items = rng.normal(size=(4, 2))
        fit = fit_gmm(items, 1, iterations=10, seed=0)
        built = build_mixed_effect_prior(fit, items, noise_sd=1.0)
        for a in range(4):
            np.testing.assert_allclose(built.prior.mixing[a], np.eye(2), atol=1e-12)
        np.testing.assert_allclose(built.prior.latent_mean, fit.means[0], atol=1e-12)

    def test_one_hot_weights_select_single_block(self):
        means = [[1.0, 0.0], [0.0, 1.0]]
        covs = [np.eye(2), np.eye(2)]
        resp = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]
        items = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.1]])
        built = build_mixed_effect_prior(self._gmm(means, covs, resp), items, 1.0)
        psi = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(built.prior.mixing[0] @ psi, psi[:2])
        np.testing.assert_allclose(built.prior.mixing[1] @ psi, psi[2:])

    def test_action_covariances_pd(self):
        rng = np.random.default_rng(138)
        items = rng.normal(size=(6, 2))
        fit = fit_gmm(items, 2, iterations=20, seed=1)
        built = build_mixed_effect_prior(fit, items, 1.0)
        for a in range(6):
            assert np.linalg.eigvalsh(built.prior.action_covs[a])[0] > 0

    def test_kronecker_pattern_matches_weighted_sum(self):
        rng = np.random.default_rng(139)
        weights = rng.dirichlet(np.ones(3), size=5)
        mixing = mixing_from_weights(weights, 2)
        psi = rng.normal(size=6)
        blocks = psi.reshape(3, 2)
        for a in range(5):
            expected = (weights[a][:, None] * blocks).sum(axis=0)
            np.testing.assert_allclose(mixing[a] @ psi, expected, atol=1e-10)

    def test_posterior_matches_hand_specialized_update(self):
        # The generic engine run on Kronecker-pattern mixing matrices must agree
        # with the mixed-effect construction: marginal prior mean is the
        # weighted mix of effect means; a small posterior stays consistent.
        rng = np.random.default_rng(140)
        d, j, k = 2, 2, 3
        weights = rng.dirichlet(np.ones(j), size=k)
        means = rng.normal(size=(j, d))
        covs = np.stack([np.eye(d) * 0.5, np.eye(d) * 1.5])
        resp = weights
        items = weights @ means
        built = build_mixed_effect_prior(self._gmm(means, covs, resp), items, 1.0)
        marg = marginalize_structured(built.prior)
        np.testing.assert_allclose(marg.means, weights @ means, atol=1e-10)
        for a in range(k):
            expected_cov = built.prior.action_covs[a] + sum(
                weights[a, j1] * weights[a, j1] * covs[j1] for j1 in range(j)
            )
            np.testing.assert_allclose(marg.covs[a], expected_cov, atol=1e-10)

        data = LoggedDataset(
            rng.normal(size=(10, d)), rng.integers(0, k, 10),
            rng.normal(size=10), np.full(10, 1 / k), k,
        )
        post = fit_posterior(built.prior, data)
        assert np.all(np.isfinite(post.means))


class TestNonStructuredBuild:
    def test_single_item_floored_variance(self):
        prior = build_nonstructured_prior(np.array([[1.0, 2.0]]), 1.0)
        np.testing.assert_allclose(prior.covs[0], 1e-6 * np.eye(2), atol=1e-12)

    def test_symmetric_pair(self):
        u = np.array([0.5, -1.5])
        prior = build_nonstructured_prior(np.stack([u, -u]), 1.0)
        np.testing.assert_allclose(prior.means[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(prior.covs[0], np.diag(u ** 2), atol=1e-12)

    def test_matches_numpy_stats(self):
        rng = np.random.default_rng(141)
        items = rng.normal(size=(40, 3))
        prior = build_nonstructured_prior(items, 1.0)
        np.testing.assert_allclose(prior.means[7], items.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(np.diag(prior.covs[3]), items.var(axis=0), atol=1e-12)


class TestFactorCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(142)
        ids = np.array([3, 5, 9])
        vectors = rng.normal(size=(3, 4))
        path = tmp_path / "factors.csv"
        write_factors(path, ids, vectors)
        got_ids, got_vecs = read_factors(path)
        np.testing.assert_array_equal(got_ids, ids)
        np.testing.assert_array_equal(got_vecs, vectors)
