import itertools

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from tsmantis.adapters import (ChannelAdapter, LinearCombiner, apply_adapter, default_d_new,
                               fit_pca, fit_rand_proj, fit_svd, fit_var_selector, make_adapter,
                               reshape_for_fit, unreshape)
from tsmantis.autograd import DimensionError, Tensor, check_gradients, default_dtype


def oracle_components(design, d_new, center):
    """Top right singular vectors by full SVD, sign-normalised."""
    X = design - design.mean(axis=0) if center else design
    _, _, vt = np.linalg.svd(X, full_matrices=True)
    W = vt[:d_new].copy()
    for row in W:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return W


class TestReshape:
    def test_row_order(self):
        X = np.arange(12.0).reshape(2, 2, 3)  # n=2, d=2, t=3
        design = reshape_for_fit(X)
        assert design.shape == (6, 2)
        np.testing.assert_array_equal(design[0], [0, 3])
        np.testing.assert_array_equal(design[4], [7, 10])
        np.testing.assert_array_equal(unreshape(design, 2, 3), X)

    def test_ragged_rejected(self):
        with pytest.raises(ValueError):
            reshape_for_fit(np.ones((3, 4)))


class TestPCA:
    def test_line(self, rng):
        t = rng.normal(size=50)
        adapter = fit_pca(np.stack([t, t], axis=1), 2)
        np.testing.assert_allclose(adapter.components_[0], np.array([1, 1]) / np.sqrt(2),
                                   atol=1e-10)
        projected = (np.stack([t, t], 1) - adapter.mean_) @ adapter.components_[1]
        assert np.var(projected) < 1e-20

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_svd_oracle(self, seed):
        design = np.random.default_rng(seed).normal(size=(40, 6)) @ np.diag([5, 4, 3, 2, 1, .5])
        for d_new in (1, 3, 6):
            np.testing.assert_allclose(fit_pca(design, d_new).components_,
                                       oracle_components(design, d_new, True), atol=1e-6)

    def test_full_rank_isometry(self, rng):
        design = rng.normal(size=(20, 4))
        a = fit_pca(design, 4)
        centered = design - a.mean_
        proj = centered @ a.components_.T
        d0 = np.linalg.norm(centered[:, None] - centered[None], axis=-1)
        d1 = np.linalg.norm(proj[:, None] - proj[None], axis=-1)
        np.testing.assert_allclose(d0, d1, atol=1e-5)

    def test_orthonormal_rows(self, rng):
        W = fit_pca(rng.normal(size=(30, 5)), 3).components_
        np.testing.assert_allclose(W @ W.T, np.eye(3), atol=1e-5)

    def test_rank_deficient(self, rng):
        col = rng.normal(size=(30, 1))
        W = fit_pca(np.hstack([col, 2 * col, -col]), 3).components_
        np.testing.assert_allclose(W @ W.T, np.eye(3), atol=1e-5)

    def test_reconstruction_energy(self, rng):
        design = rng.normal(size=(60, 5)) @ rng.normal(size=(5, 5))
        a = fit_pca(design, 2)
        centered = design - a.mean_
        recon = centered @ a.components_.T @ a.components_
        s = np.linalg.svd(centered, compute_uv=False)
        assert np.sum((centered - recon) ** 2) == pytest.approx(np.sum(s[2:] ** 2), abs=1e-4)

    def test_estimator_equals_design_fit(self, rng):
        X = rng.normal(size=(5, 4, 12))
        est = ChannelAdapter("pca", d_new=2).fit(X)
        np.testing.assert_allclose(est.components_, fit_pca(reshape_for_fit(X), 2).components_,
                                   atol=1e-10)


class TestSVD:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_svd_oracle(self, seed):
        design = np.random.default_rng(seed).normal(1.0, 1.0, size=(40, 6))
        np.testing.assert_allclose(fit_svd(design, 4).components_,
                                   oracle_components(design, 4, False), atol=1e-6)
        assert fit_svd(design, 4).mean_ is None

    def test_rank_one(self):
        W = fit_svd(np.array([[1.0, 2], [2, 4], [3, 6]]), 1).components_
        np.testing.assert_allclose(W[0], np.array([1, 2]) / np.sqrt(5), atol=1e-12)

    def test_same_subspace_as_pca_on_centred(self, rng):
        design = rng.normal(size=(50, 5))
        design -= design.mean(axis=0)
        angles = subspace_angles(fit_svd(design, 3).components_.T,
                                 fit_pca(design, 3).components_.T)
        assert angles.max() < 1e-4

    def test_optimal_truncation(self, rng):
        design = rng.normal(size=(4, 3))
        W = fit_svd(design, 2).components_
        err = np.sum((design - design @ W.T @ W) ** 2)
        s = np.linalg.svd(design, compute_uv=False)
        assert err == pytest.approx(s[2] ** 2, abs=1e-10)


class TestRandProj:
    def test_seeded(self):
        np.testing.assert_array_equal(fit_rand_proj(8, 3, 4).components_,
                                      fit_rand_proj(8, 3, 4).components_)
        assert fit_rand_proj(8, 3, 4).components_.shape == (3, 8)

    def test_norm_preservation(self, rng):
        x = rng.normal(size=1000)
        ratios = [np.sum((fit_rand_proj(1000, 10, s).components_ @ x) ** 2) / np.sum(x ** 2)
                  for s in range(100)]
        assert abs(np.mean(ratios) - 1.0) < 0.2


class TestVarSelector:
    def test_forced_choice(self):
        design = np.column_stack([np.sqrt(3) * np.array([1, -1] * 5),
                                  np.array([1, -1] * 5), np.sqrt(2) * np.array([1, -1] * 5)])
        assert sorted(fit_var_selector(design, 2).indices_) == [0, 2]

    def test_identity_when_full(self, rng):
        a = fit_var_selector(rng.normal(size=(10, 4)), 4)
        assert sorted(a.indices_) == [0, 1, 2, 3]

    def test_ties_prefer_lower_index(self):
        design = np.tile([[1.0], [-1.0]], (5, 3))
        np.testing.assert_array_equal(fit_var_selector(design, 2).indices_, [0, 1])

    @pytest.mark.parametrize("seed", range(5))
    def test_subset_enumeration(self, seed):
        design = np.random.default_rng(seed).normal(size=(30, 5)) * np.arange(1, 6)[::-1]
        var = design.var(axis=0)
        best = max(var[list(c)].sum() for c in itertools.combinations(range(5), 2))
        chosen = fit_var_selector(design, 2).indices_
        assert var[chosen].sum() == pytest.approx(best)


class TestApply:
    def test_identity_pca_centres(self, rng):
        X = rng.normal(size=(3, 2, 10))
        a = ChannelAdapter("svd", d_new=2).fit(X)
        a.components_ = np.eye(2)
        np.testing.assert_allclose(apply_adapter(a, X), X)

    @pytest.mark.parametrize("kind", ["pca", "svd", "randproj", "varsel"])
    def test_time_axis_untouched(self, kind, rng):
        X = rng.normal(size=(4, 5, 17))
        a = make_adapter(kind, d_new=3, seed=0).fit(X)
        out = a.transform(X)
        assert out.shape == (4, 3, 17)
        if kind != "pca":
            np.testing.assert_allclose(a.transform(X[:, :, 3:9]), out[:, :, 3:9])

    def test_channel_mismatch(self, rng):
        a = ChannelAdapter("pca", d_new=2).fit(rng.normal(size=(3, 4, 10)))
        with pytest.raises(DimensionError):
            apply_adapter(a, rng.normal(size=(3, 5, 10)))

    def test_default_d_new(self):
        assert default_d_new(3) == 3
        assert default_d_new(963) == 10
        assert default_d_new(3, "lcomb") == 10

    def test_fit_ignores_labels(self, rng):
        X = rng.normal(size=(6, 4, 10))
        a = ChannelAdapter("pca").fit(X, np.arange(6))
        b = ChannelAdapter("pca").fit(X, np.zeros(6))
        np.testing.assert_array_equal(a.components_, b.components_)
        assert a.d_new_ == 4

    def test_inverse_transform(self, rng):
        X = rng.normal(size=(3, 3, 8))
        a = ChannelAdapter("pca", d_new=3).fit(X)
        np.testing.assert_allclose(a.inverse_transform(a.transform(X)), X, atol=1e-10)


class TestLinearCombiner:
    def test_zero_weight(self, rng):
        comb = LinearCombiner(4, 2, weight=np.zeros((2, 4)))
        np.testing.assert_array_equal(comb(rng.normal(size=(3, 4, 10))).data, 0.0)

    def test_pca_initialisation_matches(self, rng):
        X = rng.normal(size=(4, 3, 10))
        svd = ChannelAdapter("svd", d_new=2).fit(X)
        with default_dtype(np.float64):
            comb = LinearCombiner(3, 2, weight=svd.components_)
            np.testing.assert_allclose(comb(X).data, svd.transform(X), atol=1e-12)

    def test_gradient(self, f64, rng):
        comb = LinearCombiner(3, 2, seed=1)
        x = rng.uniform(-1, 1, (2, 3, 5))
        w = Tensor(rng.normal(size=(2, 2, 5)))
        errs = check_gradients(lambda: (comb(x) * comb(x) * w).sum(), {"W": comb.weight})
        assert errs["W"] < 1e-3

    def test_default_shape(self):
        assert LinearCombiner(7).weight.shape == (10, 7)
