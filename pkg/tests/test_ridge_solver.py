import numpy as np
import pytest
import scipy.sparse as sp

from textvol.ridge_solver import fit_label_constrained, fit_ridge, fit_volume_ridge
from textvol.targets import RescaledTargets, TargetMatrix, rescale_for_loss
from textvol.text_features import FeatureMatrix, Vocabulary, assemble_features
from textvol.volume_space import build_voxel_partition

from oracles import closed_form_ridge, random_sparse_instance, scalar_ridge


def rescaled(Y, scale=None):
    scale = np.ones(Y.shape[1]) if scale is None else np.asarray(scale, dtype=float)
    return RescaledTargets(matrix=Y, column_scale=scale, loss="l2")


class TestFitRidge:
    def test_matches_closed_form_on_random_instances(self, rng):
        for _ in range(10):
            n = int(rng.integers(10, 30))
            d = int(rng.integers(3, 8))
            m = int(rng.integers(1, 5))
            X, Y, lam = random_sparse_instance(rng, n, d, m)
            fm = FeatureMatrix.from_matrix(X)
            model = fit_ridge(fm, rescaled(Y), lam)
            Xc = np.asarray(X.todense()) - fm.means
            expected = closed_form_ridge(Xc, Y - Y.mean(axis=0), lam)
            np.testing.assert_allclose(model.beta_rescaled, expected, atol=1e-8)

    def test_iterative_path_matches_direct(self, rng):
        X, Y, lam = random_sparse_instance(rng, 25, 6, 3)
        fm = FeatureMatrix.from_matrix(X)
        direct = fit_ridge(fm, rescaled(Y), lam)
        iterative = fit_ridge(fm, rescaled(Y), lam, direct_threshold=0)
        np.testing.assert_allclose(iterative.beta_rescaled, direct.beta_rescaled, atol=1e-8)

    @pytest.mark.parametrize("direct_threshold", [4096, 0])
    def test_normal_equation_residual(self, rng, direct_threshold):
        X, Y, lam = random_sparse_instance(rng, 30, 8, 3)
        fm = FeatureMatrix.from_matrix(X)
        model = fit_ridge(fm, rescaled(Y), lam, direct_threshold=direct_threshold)
        Xc = np.asarray(X.todense()) - fm.means
        Yc = Y - Y.mean(axis=0)
        rhs = Xc.T @ Yc
        lhs = (Xc.T @ Xc + lam * np.eye(8)) @ model.beta_rescaled
        assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(rhs)

    def test_huge_penalty_gives_mean_predictions(self, rng):
        X, Y, _ = random_sparse_instance(rng, 20, 5, 2)
        fm = FeatureMatrix.from_matrix(X)
        model = fit_ridge(fm, rescaled(Y), 1e12)
        assert np.abs(model.beta).max() <= 1e-9
        np.testing.assert_allclose(model.intercept, Y.mean(axis=0))

    def test_volume_rescaling_maps_back_through_column_scale(self, rng, toy_atlas):
        Y = rng.dirichlet(np.ones(2), size=15)
        X, _, lam = random_sparse_instance(rng, 15, 4, 2)
        fm = FeatureMatrix.from_matrix(X)
        tm = TargetMatrix(matrix=Y, partition=toy_atlas)
        model = fit_volume_ridge(fm, tm, lam)
        view = rescale_for_loss(tm, "l2")
        direct = fit_ridge(fm, view, lam)
        np.testing.assert_allclose(model.beta, direct.beta_rescaled * view.column_scale, atol=1e-12)
        np.testing.assert_allclose(model.intercept, Y.mean(axis=0), atol=1e-12)

    def test_equal_volumes_leave_raw_basis_fit_unchanged(self, rng, toy_atlas):
        # with equal region volumes Y' is proportional to Y and the raw-basis
        # argmin coincides with plain ridge at the same penalty
        Y = rng.dirichlet(np.ones(2), size=15)
        X, _, lam = random_sparse_instance(rng, 15, 4, 2)
        fm = FeatureMatrix.from_matrix(X)
        tm = TargetMatrix(matrix=Y, partition=toy_atlas)
        model = fit_volume_ridge(fm, tm, lam)
        plain = fit_ridge(fm, rescaled(Y), lam)
        np.testing.assert_allclose(model.beta, plain.beta_rescaled, atol=1e-10)

    def test_columns_decouple_bitwise(self, rng):
        X, Y, lam = random_sparse_instance(rng, 20, 5, 3)
        fm = FeatureMatrix.from_matrix(X)
        joint = fit_ridge(fm, rescaled(Y), lam)
        for k in range(3):
            single = fit_ridge(fm, rescaled(Y[:, [k]]), lam)
            np.testing.assert_array_equal(joint.beta_rescaled[:, k], single.beta_rescaled[:, 0])

    def test_rejects_nonpositive_penalty(self, rng):
        X, Y, _ = random_sparse_instance(rng, 10, 3, 1)
        fm = FeatureMatrix.from_matrix(X)
        with pytest.raises(ValueError):
            fit_ridge(fm, rescaled(Y), 0.0)


class TestLabelConstrained:
    @pytest.fixture
    def world(self, rng, toy_atlas):
        vocab = Vocabulary.from_phrases(
            ["thalamus", "putamen", "caudate", "amygdala", "cortex", "pons", "vermis", "insula"]
        )
        texts = []
        for _ in range(20):
            words = rng.choice(vocab.phrases, size=rng.integers(3, 9))
            texts.append(" ".join(words))
        fm = assemble_features(texts, vocab)
        Y = rng.dirichlet(np.ones(2), size=20)
        tm = TargetMatrix(matrix=Y, partition=toy_atlas)
        return vocab, fm, tm

    def test_diagonal_structure(self, world, toy_atlas):
        vocab, fm, tm = world
        model = fit_label_constrained(fm, tm, toy_atlas, 0.5, vocab)
        # labels "amygdala" and "insula" sit at vocabulary positions 3 and 7
        nonzero = np.argwhere(model.beta != 0)
        assert set(map(tuple, nonzero)) <= {(3, 0), (7, 1)}
        assert model.loss == "label"

    def test_univariate_coefficients_match_scalar_oracle(self, world, toy_atlas):
        vocab, fm, tm = world
        lam = 0.7
        model = fit_label_constrained(fm, tm, toy_atlas, lam, vocab)
        X = np.asarray(fm.matrix.todense())
        for k, label in enumerate(toy_atlas.labels):
            t = vocab.index[label]
            expected = scalar_ridge(X[:, t], tm.matrix[:, k], lam)
            assert model.beta[t, k] == pytest.approx(expected, abs=1e-12)

    def test_voxel_partition_is_an_error(self, world):
        vocab, fm, tm = world
        grid = build_voxel_partition([(0, 0, 0), (4, 4, 4)], 2.0)
        tm_grid = TargetMatrix(matrix=np.abs(np.random.default_rng(0).random((20, 8))), partition=grid)
        with pytest.raises(ValueError, match="labeled atlas"):
            fit_label_constrained(fm, tm_grid, grid, 0.5, vocab)

    def test_missing_label_warns_and_zeroes(self, rng, toy_atlas):
        vocab = Vocabulary.from_phrases(["amygdala", "foo"])  # no "insula"
        fm = assemble_features(["amygdala foo", "foo amygdala amygdala"], vocab)
        tm = TargetMatrix(matrix=rng.dirichlet(np.ones(2), size=2), partition=toy_atlas)
        with pytest.warns(UserWarning, match="insula"):
            model = fit_label_constrained(fm, tm, toy_atlas, 1.0, vocab)
        np.testing.assert_array_equal(model.beta[:, 1], 0.0)
