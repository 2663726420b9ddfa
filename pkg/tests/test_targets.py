import numpy as np
import pytest

from textvol._container import ContainerError
from textvol.density import KdeConfig
from textvol.encoder import region_field
from textvol.targets import (
    TargetMatrix,
    build_targets,
    load_targets,
    rescale_for_loss,
    save_targets,
    training_documents,
)
from textvol.text_features import Document, corpus_fingerprint
from textvol.volume_space import build_voxel_partition

from oracles import closed_form_ridge, naive_binned_kde


def doc(doc_id, coords, text="irrelevant"):
    return Document(doc_id, text, np.asarray(coords, dtype=float).reshape(-1, 3))


class TestBuildTargets:
    def test_atlas_counting_row(self, toy_atlas):
        docs = [doc("a", [[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [2.5, 0.5, 0.5]])]
        tm = build_targets(docs, toy_atlas)
        np.testing.assert_allclose(tm.matrix, [[2 / 3, 1 / 3]])

    def test_identical_documents_give_identical_rows(self, toy_atlas, rng):
        coords = rng.uniform(0, 4, size=(6, 3))
        tm = build_targets([doc("a", coords), doc("b", coords)], toy_atlas)
        np.testing.assert_array_equal(tm.matrix[0], tm.matrix[1])

    def test_voxel_rows_match_naive_kde_mass(self, rng):
        part = build_voxel_partition([(0, 0, 0), (12, 12, 12)], 1.0)
        coords = rng.uniform(2, 10, size=(9, 3))
        tm = build_targets([doc("a", coords)], part, KdeConfig())
        binned_counts = np.zeros(part.shape)
        idx = np.floor(coords).astype(int)
        np.add.at(binned_counts, (idx[:, 0], idx[:, 1], idx[:, 2]), 1.0)
        naive = naive_binned_kde(binned_counts, 9.0, 1.0, 1.0)
        np.testing.assert_allclose(tm.matrix[0], naive.ravel(order="C"), atol=1e-8)

    def test_coordinate_free_document_is_an_error(self, toy_atlas):
        with pytest.raises(ValueError, match="without coordinates"):
            build_targets([doc("a", np.zeros((0, 3)))], toy_atlas)

    def test_training_documents_filter(self, toy_atlas):
        docs = [
            doc("in", [[0.5, 0.5, 0.5]]),
            doc("out", [[40.0, 0.0, 0.0]]),
            doc("none", np.zeros((0, 3))),
        ]
        kept = training_documents(docs, toy_atlas)
        assert [d.doc_id for d in kept] == ["in"]

    def test_row_mass_bounds(self, rng):
        part = build_voxel_partition([(0, 0, 0), (16, 16, 16)], 1.0)
        docs = [doc(str(i), rng.uniform(6, 10, size=(8, 3))) for i in range(5)]
        tm = build_targets(docs, part, KdeConfig())
        sums = tm.matrix.sum(axis=1)
        assert np.all(sums <= 1.0 + 1e-12)
        assert np.all(sums >= 1.0 - 1e-3)

    def test_threaded_build_matches_serial(self, toy_atlas, rng):
        docs = [doc(str(i), rng.uniform(0, 4, size=(5, 3))) for i in range(8)]
        serial = build_targets(docs, toy_atlas)
        threaded = build_targets(docs, toy_atlas, n_threads=4)
        np.testing.assert_array_equal(serial.matrix, threaded.matrix)


class TestRescaleForLoss:
    def test_l1_is_identity(self, toy_atlas, rng):
        tm = TargetMatrix(matrix=rng.dirichlet(np.ones(2), size=4), partition=toy_atlas)
        view = rescale_for_loss(tm, "l1")
        np.testing.assert_array_equal(view.matrix, tm.matrix)
        np.testing.assert_array_equal(view.column_scale, [1.0, 1.0])

    def test_l2_divides_by_sqrt_volume(self):
        part = build_voxel_partition([(0, 0, 0), (2, 1, 1)], 1.0)
        # hand-build volumes (4, 1) by using an atlas-like target matrix
        from textvol.volume_space import ATLAS, Partition

        region = np.array([[[1]], [[2]]], dtype=np.int32)
        part = Partition(
            kind=ATLAS,
            region_of_voxel=np.repeat(region, [4, 1], axis=0).reshape(5, 1, 1),
            affine=np.eye(4),
            volumes=np.array([4.0, 1.0]),
        )
        tm = TargetMatrix(matrix=np.array([[0.8, 0.2]]), partition=part)
        view = rescale_for_loss(tm, "l2")
        np.testing.assert_allclose(view.matrix, [[0.4, 0.2]])
        np.testing.assert_allclose(view.column_scale, [2.0, 1.0])

    def test_unknown_loss(self, toy_atlas, rng):
        tm = TargetMatrix(matrix=rng.dirichlet(np.ones(2), size=3), partition=toy_atlas)
        with pytest.raises(ValueError, match="unknown loss"):
            rescale_for_loss(tm, "huber")

    def test_equal_volumes_leave_ridge_argmin_unchanged(self, rng):
        # with equal region volumes the rescaling multiplies the objective by
        # a constant, so the closed-form fit of Y' (mapped back) equals the
        # closed-form fit of Y at the same penalty
        X = rng.normal(size=(5, 3))
        Y = np.abs(rng.normal(size=(5, 2)))
        volume = 3.7
        lam = 0.9
        Xc = X - X.mean(axis=0)
        beta_direct = closed_form_ridge(Xc, Y - Y.mean(axis=0), lam)
        Yp = Y / np.sqrt(volume)
        beta_rescaled = closed_form_ridge(Xc, Yp - Yp.mean(axis=0), lam)
        np.testing.assert_allclose(beta_rescaled * np.sqrt(volume), beta_direct, atol=1e-12)


def loss_forms(partition, y_row, pred_row, kind):
    """Integral (voxel-sum) and factorized finite-dimensional loss values."""
    p_hat = region_field(y_row / partition.volumes, partition)
    q = region_field(pred_row / partition.volumes, partition)
    diff = p_hat.values - q.values
    if kind == "l1":
        integral = np.abs(diff).sum() * partition.voxel_volume_mm3
        finite = np.abs(y_row - pred_row).sum()
    else:
        integral = (diff**2).sum() * partition.voxel_volume_mm3
        scale = np.sqrt(partition.volumes)
        finite = ((y_row / scale - pred_row / scale) ** 2).sum()
    return integral, finite


class TestLossFactorization:
    @pytest.mark.parametrize("kind", ["l1", "l2"])
    def test_integral_equals_factorized_form(self, kind, rng, toy_atlas):
        part_voxel = build_voxel_partition([(0, 0, 0), (8, 8, 8)], 2.0)
        for part in (toy_atlas, part_voxel):
            for _ in range(20):
                y_row = rng.dirichlet(np.ones(part.n_regions))
                pred_row = y_row + rng.normal(0, 0.1, part.n_regions)
                integral, finite = loss_forms(part, y_row, pred_row, kind)
                np.testing.assert_allclose(integral, finite, rtol=1e-10, atol=1e-12)


class TestTargetCache:
    def test_round_trip_and_key_mismatches(self, toy_atlas, tmp_path, rng):
        docs = [doc(str(i), rng.uniform(0, 4, size=(4, 3))) for i in range(3)]
        tm = build_targets(docs, toy_atlas, KdeConfig())
        fp = corpus_fingerprint(docs)
        path = tmp_path / "targets.bin"
        save_targets(tm, path, fp)
        back = load_targets(path, toy_atlas, fp, KdeConfig())
        np.testing.assert_allclose(back.matrix, tm.matrix, atol=1e-7)  # float32 payload
        assert back.doc_ids == tm.doc_ids
        with pytest.raises(ContainerError, match="corpus"):
            load_targets(path, toy_atlas, "deadbeef", KdeConfig())
        with pytest.raises(ContainerError, match="KDE"):
            load_targets(path, toy_atlas, fp, KdeConfig(bandwidth=2.0))
