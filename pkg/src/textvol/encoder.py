"""Text-to-density prediction from fitted coefficients.

An :class:`EncoderModel` holds effective coefficients applied directly to a
raw term-frequency row: ``y_pred = intercept + x @ beta`` gives the
predicted probability mass per region, and the predicted density assigns
``y_pred[k] / volume[k]`` to every voxel of region k, zero on background.

For scoring, predictions are rectified at zero, renormalized, and mixed
half-and-half with the uniform density over the foreground so the result is
a strictly positive pdf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from ._container import ContainerError, read_container, write_container
from ._validation import as_points
from .density import KdeConfig
from .ridge_solver import RidgeModel
from .targets import TargetMatrix
from .text_features import Document, FeatureMatrix, Vocabulary, assemble_features, vectorize
from .volume_space import DensityVolume, Partition, locate_many

# Rectified predictions with less mass than this are replaced by the uniform
# density before background mixing.
MIN_PREDICTED_MASS = 1e-6


@dataclass(frozen=True)
class EncoderModel:
    """Linear text-to-region-mass predictor tied to a vocabulary and partition."""

    beta: np.ndarray  # (d, m), applied to raw term-frequency rows
    intercept: np.ndarray  # (m,)
    loss: str  # "lad" | "ridge" | "label" | "mean"
    lam: float | None
    vocabulary: Vocabulary
    partition: Partition
    kde: KdeConfig | None = None

    def __post_init__(self):
        beta = np.ascontiguousarray(self.beta, dtype=np.float64)
        intercept = np.ascontiguousarray(self.intercept, dtype=np.float64)
        if beta.shape != (len(self.vocabulary), self.partition.n_regions):
            raise ValueError(
                f"beta shape {beta.shape} does not match "
                f"(d={len(self.vocabulary)}, m={self.partition.n_regions})"
            )
        if intercept.shape != (self.partition.n_regions,):
            raise ValueError(f"intercept must have length {self.partition.n_regions}")
        beta.setflags(write=False)
        intercept.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "intercept", intercept)


def _effective_intercept(intercept_raw: np.ndarray, means: np.ndarray, beta: np.ndarray) -> np.ndarray:
    # Folds the feature centering into the intercept so predictions can use
    # raw sparse rows: y = (ybar - xbar @ beta) + x @ beta.
    return intercept_raw - means @ beta


def model_from_lad(
    beta: np.ndarray,
    features: FeatureMatrix,
    targets: TargetMatrix,
    vocabulary: Vocabulary,
    lam: float,
    kde: KdeConfig | None = None,
) -> EncoderModel:
    """Wrap a least-deviations fit (raw-basis coefficients) as an encoder."""
    return EncoderModel(
        beta=beta,
        intercept=_effective_intercept(targets.column_means, features.means, beta),
        loss="lad",
        lam=float(lam),
        vocabulary=vocabulary,
        partition=targets.partition,
        kde=kde,
    )


def model_from_ridge(
    ridge: RidgeModel,
    features: FeatureMatrix,
    vocabulary: Vocabulary,
    partition: Partition,
    kde: KdeConfig | None = None,
) -> EncoderModel:
    return EncoderModel(
        beta=ridge.beta,
        intercept=_effective_intercept(ridge.intercept, features.means, ridge.beta),
        loss=ridge.loss,
        lam=ridge.lam,
        vocabulary=vocabulary,
        partition=partition,
        kde=kde,
    )


def baseline_mean_map(
    targets: TargetMatrix,
    vocabulary: Vocabulary,
    kde: KdeConfig | None = None,
) -> EncoderModel:
    """Text-independent baseline: zero coefficients, mean training map intercept."""
    if targets.n == 0:
        raise ValueError("cannot build a baseline from zero training targets")
    return EncoderModel(
        beta=np.zeros((len(vocabulary), targets.m)),
        intercept=targets.column_means.copy(),
        loss="mean",
        lam=None,
        vocabulary=vocabulary,
        partition=targets.partition,
        kde=kde,
    )


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def predict_regions(model: EncoderModel, text: str) -> np.ndarray:
    """Predicted probability mass per region: intercept + x @ beta."""
    x = vectorize(text, model.vocabulary)
    return model.intercept + np.asarray((x @ model.beta)).ravel()


def predict_regions_many(model: EncoderModel, rows: sp.spmatrix) -> np.ndarray:
    """Batched prediction from already-vectorized rows."""
    return np.asarray(rows @ model.beta) + model.intercept


def region_field(region_values: np.ndarray, partition: Partition) -> DensityVolume:
    """Paint one value per region onto the grid; background voxels get 0."""
    lut = np.concatenate(([0.0], np.asarray(region_values, dtype=np.float64)))
    return DensityVolume(values=lut[partition.region_of_voxel], affine=partition.affine)


def predict_density(model: EncoderModel, text: str) -> DensityVolume:
    """Predicted density field: y_pred[k] / v_k inside region k, 0 outside."""
    y_pred = predict_regions(model, text)
    return region_field(y_pred / model.partition.volumes, model.partition)


def mixed_region_densities(y_pred: np.ndarray, partition: Partition) -> np.ndarray:
    """Per-region density of the background-mixed pdf q'.

    Rectifies the predicted masses at zero, renormalizes to unit mass (or
    substitutes the uniform density when nearly no mass survives), then
    averages with the uniform density 1/V.  Every entry is >= 1/(2V).
    """
    V = partition.brain_volume_mm3
    positive = np.maximum(np.asarray(y_pred, dtype=np.float64), 0.0)
    mass = positive.sum()
    if mass > MIN_PREDICTED_MASS:
        density = positive / partition.volumes / mass
    else:
        density = np.full(partition.n_regions, 1.0 / V)
    return 0.5 * (1.0 / V + density)


def with_background(q: DensityVolume, partition: Partition) -> DensityVolume:
    """Background-mixed pdf q' as a voxel field.

    q is rectified at zero and renormalized to unit mass over the foreground
    (or replaced by the uniform density if its mass is below
    ``MIN_PREDICTED_MASS``), then mixed half-and-half with uniform 1/V.
    The result is strictly positive on the foreground, zero outside, and
    integrates to 1.
    """
    if q.values.shape != partition.shape:
        raise ValueError(f"field shape {q.values.shape} does not match partition {partition.shape}")
    brain = partition.region_of_voxel > 0
    if not np.any(brain):
        raise ValueError("partition has an empty foreground")
    V = partition.brain_volume_mm3
    positive = np.where(brain, np.maximum(q.values, 0.0), 0.0)
    mass = positive.sum() * partition.voxel_volume_mm3
    if mass > MIN_PREDICTED_MASS:
        positive = positive / mass
    else:
        positive = brain / V
    values = np.where(brain, 0.5 * (1.0 / V + positive), 0.0)
    return DensityVolume(values=values, affine=q.affine)


def expected_log_likelihood(
    target_rows: np.ndarray,
    predicted_rows: np.ndarray,
    partition: Partition,
) -> np.ndarray:
    """Expected per-document score of predictions under the plugin targets.

    For a document with target row y (mass per region, summing to <= 1) and
    predicted row y_pred, this is the expectation of the per-coordinate
    log-density of q' when coordinates are distributed per y; the missing
    mass (out-of-foreground coordinates) contributes the background floor
    log(1 / 2V).  Used for coordinate-free lambda selection.
    """
    target_rows = np.atleast_2d(np.asarray(target_rows, dtype=np.float64))
    predicted_rows = np.atleast_2d(np.asarray(predicted_rows, dtype=np.float64))
    floor = np.log(1.0 / (2.0 * partition.brain_volume_mm3))
    scores = np.empty(target_rows.shape[0])
    for i in range(target_rows.shape[0]):
        log_density = np.log(mixed_region_densities(predicted_rows[i], partition))
        in_mass = target_rows[i].sum()
        scores[i] = target_rows[i] @ log_density + (1.0 - in_mass) * floor
    return scores


# ---------------------------------------------------------------------------
# Model serialization
# ---------------------------------------------------------------------------

_MODEL_KIND = "MODEL"


def save_model(model: EncoderModel, path, extra_meta: dict | None = None) -> None:
    """Write the documented byte layout: header metadata, then float32 beta
    (d x m, row-major) and the intercept row."""
    meta = {
        "vocabulary": model.vocabulary.fingerprint,
        "partition": model.partition.fingerprint,
        "loss": model.loss,
        "lam": model.lam,
        "d": model.beta.shape[0],
        "m": model.beta.shape[1],
        "kde": model.kde.fingerprint_dict() if model.kde else None,
    }
    if extra_meta:
        meta["extra"] = extra_meta
    write_container(
        path,
        _MODEL_KIND,
        meta,
        [("beta", model.beta, "<f4"), ("intercept", model.intercept, "<f4")],
    )


def load_model(path, vocabulary: Vocabulary, partition: Partition) -> EncoderModel:
    """Read a model file, checking it was fitted for this vocabulary/partition."""
    meta, arrays = read_container(path, _MODEL_KIND)
    if meta["vocabulary"] != vocabulary.fingerprint:
        raise ContainerError(f"{path}: model was fitted with a different vocabulary")
    if meta["partition"] != partition.fingerprint:
        raise ContainerError(f"{path}: model was fitted on a different partition")
    kde = KdeConfig(**meta["kde"]) if meta.get("kde") else None
    return EncoderModel(
        beta=arrays["beta"].astype(np.float64),
        intercept=arrays["intercept"].astype(np.float64),
        loss=meta["loss"],
        lam=meta["lam"],
        vocabulary=vocabulary,
        partition=partition,
        kde=kde,
    )


# ---------------------------------------------------------------------------
# sklearn-style estimator
# ---------------------------------------------------------------------------


class TextDensityEncoder(BaseEstimator):
    """Estimator mapping free text to spatial probability densities.

    Parameters
    ----------
    partition : Partition
        Spatial support of the prediction (voxel grid or atlas).
    vocabulary : Vocabulary
        Phrase vocabulary for term-frequency features.
    loss : {"lad", "ridge", "label", "mean"}
        Fitting objective: penalized least deviations, volume-rescaled
        ridge, the diagonal label-constrained model, or the text-independent
        mean map.
    lam : float, optional
        Penalty strength; when None it is chosen by k-fold cross-validation
        over ``lambda_grid`` (or a default grid).
    lambda_grid : array-like, optional
        Decreasing candidate penalties for selection.
    kde : KdeConfig, optional
        Smoothing used to build voxel-grid targets.
    inner_folds : int
        Folds for the internal lambda selection.
    seed : int
        Seed for the internal fold shuffling.
    """

    def __init__(
        self,
        partition: Partition,
        vocabulary: Vocabulary,
        loss: str = "lad",
        lam: float | None = None,
        lambda_grid=None,
        kde: KdeConfig | None = None,
        inner_folds: int = 3,
        seed: int = 0,
        tol: float = 1e-6,
        max_iter: int = 2000,
    ):
        self.partition = partition
        self.vocabulary = vocabulary
        self.loss = loss
        self.lam = lam
        self.lambda_grid = lambda_grid
        self.kde = kde
        self.inner_folds = inner_folds
        self.seed = seed
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, texts, coordinate_lists):
        """Fit from raw texts and per-document mm coordinate arrays."""
        from . import lad_solver  # local import: lad_solver uses this module's scoring
        from .ridge_solver import fit_label_constrained, fit_volume_ridge
        from .targets import build_targets

        texts = list(texts)
        docs = [
            Document(doc_id=str(i), text=t, coordinates=as_points(c, allow_empty=True))
            for i, (t, c) in enumerate(zip(texts, coordinate_lists, strict=True))
        ]
        kde = self.kde or KdeConfig()
        features = assemble_features(texts, self.vocabulary)
        targets = build_targets(docs, self.partition, kde)

        lam = self.lam
        if lam is None and self.loss not in ("mean",):
            grid = self.lambda_grid
            if grid is None:
                grid = lad_solver.default_lambda_grid(features.n, targets.m)
            lam = lad_solver.select_lambda(
                features,
                targets,
                grid,
                self.inner_folds,
                loss=self.loss,
                vocabulary=self.vocabulary,
                seed=self.seed,
                tol=self.tol,
                max_iter=self.max_iter,
            )

        if self.loss == "lad":
            beta, _, report = lad_solver.fit_lad(
                features, targets, lam, tol=self.tol, max_iter=self.max_iter
            )
            self.report_ = report
            self.model_ = model_from_lad(beta, features, targets, self.vocabulary, lam, kde)
        elif self.loss == "ridge":
            ridge = fit_volume_ridge(features, targets, lam)
            self.model_ = model_from_ridge(ridge, features, self.vocabulary, self.partition, kde)
        elif self.loss == "label":
            ridge = fit_label_constrained(features, targets, self.partition, lam, self.vocabulary)
            self.model_ = model_from_ridge(ridge, features, self.vocabulary, self.partition, kde)
        elif self.loss == "mean":
            self.model_ = baseline_mean_map(targets, self.vocabulary, kde)
        else:
            raise ValueError(f"unknown loss {self.loss!r}")

        self.lam_ = lam
        self.coef_ = self.model_.beta.T
        self.intercept_ = self.model_.intercept
        return self

    def predict(self, texts) -> np.ndarray:
        """Predicted probability mass per region, one row per text."""
        rows = sp.vstack([vectorize(t, self.vocabulary) for t in texts], format="csr")
        return predict_regions_many(self.model_, rows)

    def predict_density(self, text: str) -> DensityVolume:
        return predict_density(self.model_, text)

    def score(self, texts, coordinate_lists) -> float:
        """Mean held-out coordinate log-likelihood under the mixed density."""
        predictions = self.predict(texts)
        floor = np.log(1.0 / (2.0 * self.partition.brain_volume_mm3))
        scores = []
        for y_pred, coords in zip(predictions, coordinate_lists, strict=True):
            points = as_points(coords)
            density = mixed_region_densities(y_pred, self.partition)
            regions = locate_many(self.partition, points)
            values = np.where(regions > 0, np.log(density[np.maximum(regions - 1, 0)]), floor)
            scores.append(values.mean())
        return float(np.mean(scores))
