"""Scoring, model comparison, and term-contrast maps.

The evaluation metric is the mean log-density of a document's held-out
coordinates under the background-mixed prediction q'; a uniform prediction
scores exactly ``-log V``, the chance level.  Model specs are compared with
shuffle-split cross-validation on identical, seed-derived splits so that
per-fold scores are paired across specs.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._validation import as_points
from .density import KdeConfig
from .encoder import EncoderModel, mixed_region_densities, region_field
from .lad_solver import default_lambda_grid, fit_lad, select_lambda
from .ridge_solver import fit_label_constrained, fit_volume_ridge
from .targets import TargetMatrix, build_targets
from .text_features import FeatureMatrix, Vocabulary, vectorize
from .volume_space import DensityVolume, Partition, locate_many, voxel_indices

LOSSES = ("lad", "ridge", "label", "mean")

_MASS_TOL = 1e-6


def chance_score(partition: Partition) -> float:
    """Mean log-likelihood of a uniform prediction: -log V."""
    return -float(np.log(partition.brain_volume_mm3))


def score_document(q_prime: DensityVolume, coords, background_floor: float | None = None) -> float:
    """Mean log q'(l) over a document's coordinates.

    Coordinates in voxels where q' is zero (outside the foreground) and
    coordinates off the grid contribute the background floor ``1/(2V)``,
    inferred from the positive support of q' unless given explicitly.
    """
    points = as_points(coords)
    values = q_prime.values
    if background_floor is None:
        support = float(np.count_nonzero(values > 0)) * q_prime.voxel_volume_mm3
        if support <= 0:
            raise ValueError("q' is nowhere positive")
        background_floor = 1.0 / (2.0 * support)
    idx, _ = voxel_indices(q_prime.affine, points)
    shape = np.asarray(values.shape, dtype=np.int64)
    inside = np.all((idx >= 0) & (idx < shape), axis=1)
    picked = np.full(points.shape[0], 0.0)
    if np.any(inside):
        sel = idx[inside]
        picked[inside] = values[sel[:, 0], sel[:, 1], sel[:, 2]]
    picked = np.where(picked > 0, picked, background_floor)
    return float(np.mean(np.log(picked)))


def tv_distance(p, q) -> float:
    """Total variation distance: half the L1 distance between the densities.

    Accepts two :class:`DensityVolume` fields (integrated with the voxel
    volume) or two plain probability vectors over regions.  Both inputs must
    be nonnegative and integrate to 1 within 1e-6.
    """
    if isinstance(p, DensityVolume) != isinstance(q, DensityVolume):
        raise TypeError("tv_distance needs two volumes or two region measures, not a mix")
    if isinstance(p, DensityVolume):
        if p.values.shape != q.values.shape:
            raise ValueError("volumes have different shapes")
        weight = p.voxel_volume_mm3
        a, b = p.values.ravel(), q.values.ravel()
    else:
        weight = 1.0
        a = np.asarray(p, dtype=np.float64).ravel()
        b = np.asarray(q, dtype=np.float64).ravel()
        if a.shape != b.shape:
            raise ValueError("measures have different lengths")
    for name, vec in (("p", a), ("q", b)):
        if vec.min() < 0:
            raise ValueError(f"{name} has negative entries")
        mass = vec.sum() * weight
        if abs(mass - 1.0) > _MASS_TOL:
            raise ValueError(f"{name} integrates to {mass:.8f}, not 1")
    return float(0.5 * np.abs(a - b).sum() * weight)


# ---------------------------------------------------------------------------
# Model comparison harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """One model to fit and score in the comparison harness."""

    name: str
    loss: str
    partition: Partition
    kde: KdeConfig = field(default_factory=KdeConfig)
    lam: float | None = None
    lambda_grid: tuple[float, ...] | None = None
    inner_folds: int = 3

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")

    def descriptor(self) -> dict:
        return {
            "name": self.name,
            "loss": self.loss,
            "partition_kind": self.partition.kind,
            "partition": self.partition.fingerprint,
            "n_regions": self.partition.n_regions,
            "kde": self.kde.fingerprint_dict(),
            "lam": self.lam,
            "lambda_grid": list(self.lambda_grid) if self.lambda_grid else None,
            "inner_folds": self.inner_folds,
        }


@dataclass(frozen=True)
class FoldResult:
    fold: int
    lam: float | None
    doc_ids: tuple[str, ...]
    scores: tuple[float, ...]

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores))


@dataclass(frozen=True)
class EvalReport:
    """Per-document and per-fold scores for one model spec."""

    name: str
    model: dict
    chance: float
    folds: tuple[FoldResult, ...]

    @property
    def fold_means(self) -> np.ndarray:
        return np.array([fold.mean_score for fold in self.folds])

    @property
    def per_document_scores(self) -> np.ndarray:
        return np.concatenate([fold.scores for fold in self.folds])

    def aggregate(self) -> dict:
        scores = self.per_document_scores
        return {
            "mean": float(scores.mean()),
            "q25": float(np.quantile(scores, 0.25)),
            "median": float(np.quantile(scores, 0.5)),
            "q75": float(np.quantile(scores, 0.75)),
        }

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "model": self.model,
            "chance_score": self.chance,
            "fold_mean_scores": [fold.mean_score for fold in self.folds],
            "aggregate": self.aggregate(),
            "folds": [
                {
                    "fold": fold.fold,
                    "lambda": fold.lam,
                    "doc_ids": list(fold.doc_ids),
                    "scores": list(fold.scores),
                }
                for fold in self.folds
            ],
        }


def _fit_spec_coefficients(
    spec: ModelSpec,
    features: FeatureMatrix,
    targets: TargetMatrix,
    vocabulary: Vocabulary,
) -> tuple[float | None, np.ndarray, np.ndarray]:
    """Fit one spec on a training fold; returns (lam, beta, effective intercept)."""
    if spec.loss == "mean":
        beta = np.zeros((features.d, targets.m))
        return None, beta, targets.column_means.copy()

    lam = spec.lam
    if lam is None:
        grid = spec.lambda_grid or tuple(default_lambda_grid(features.n, targets.m))
        lam = select_lambda(
            features,
            targets,
            grid,
            spec.inner_folds,
            loss=spec.loss,
            vocabulary=vocabulary,
        )
    if spec.loss == "lad":
        beta, _, _ = fit_lad(features, targets, lam)
    elif spec.loss == "ridge":
        beta = fit_volume_ridge(features, targets, lam).beta
    else:
        beta = fit_label_constrained(features, targets, targets.partition, lam, vocabulary).beta
    intercept = targets.column_means - features.means @ beta
    return lam, beta, intercept


def make_splits(n_documents: int, n_folds: int, test_fraction: float, seed: int):
    """Seed-derived shuffle splits shared by every spec (paired comparisons)."""
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    n_test = int(round(test_fraction * n_documents))
    if n_test < 1 or n_test >= n_documents:
        raise ValueError(
            f"corpus of {n_documents} documents is too small to split "
            f"at test fraction {test_fraction}"
        )
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(n_folds):
        perm = rng.permutation(n_documents)
        splits.append((np.sort(perm[n_test:]), np.sort(perm[:n_test])))
    return splits


def shuffle_split_cv(
    corpus,
    vocabulary: Vocabulary,
    model_specs,
    n_folds: int = 100,
    test_fraction: float = 0.1,
    seed: int = 0,
    n_threads: int = 1,
) -> list[EvalReport]:
    """Fit and score every spec over shared random splits.

    Every document must report coordinates.  Features are vectorized once;
    per-partition target matrices are built once over the full corpus and
    sliced per fold, while standardization statistics are recomputed from
    each training fold alone.
    """
    docs = list(corpus)
    missing = [doc.doc_id for doc in docs if doc.n_coordinates == 0]
    if missing:
        raise ValueError(f"evaluation corpus has documents without coordinates: {missing[:5]}")
    splits = make_splits(len(docs), n_folds, test_fraction, seed)

    X = sp.vstack([vectorize(doc.text, vocabulary) for doc in docs], format="csr")
    targets_cache: dict = {}
    regions_cache: dict = {}
    for spec in model_specs:
        key = (spec.partition.fingerprint, tuple(sorted(spec.kde.fingerprint_dict().items())))
        if key not in targets_cache:
            targets_cache[key] = build_targets(docs, spec.partition, spec.kde, n_threads=n_threads)
        if spec.partition.fingerprint not in regions_cache:
            regions_cache[spec.partition.fingerprint] = [
                locate_many(spec.partition, doc.coordinates) for doc in docs
            ]

    reports = []
    for spec in model_specs:
        key = (spec.partition.fingerprint, tuple(sorted(spec.kde.fingerprint_dict().items())))
        full_targets = targets_cache[key]
        doc_regions = regions_cache[spec.partition.fingerprint]
        partition = spec.partition
        floor = np.log(1.0 / (2.0 * partition.brain_volume_mm3))

        def run_fold(item):
            fold_i, (train_idx, test_idx) = item
            f_train = FeatureMatrix.from_matrix(X[train_idx])
            t_train = full_targets.subset(train_idx)
            lam, beta, intercept = _fit_spec_coefficients(spec, f_train, t_train, vocabulary)
            predicted = np.asarray(X[test_idx] @ beta) + intercept
            scores = []
            for row, doc_idx in enumerate(test_idx):
                density = mixed_region_densities(predicted[row], partition)
                regions = doc_regions[doc_idx]
                log_vals = np.where(
                    regions > 0, np.log(density[np.maximum(regions - 1, 0)]), floor
                )
                scores.append(float(log_vals.mean()))
            return FoldResult(
                fold=fold_i,
                lam=lam,
                doc_ids=tuple(docs[i].doc_id for i in test_idx),
                scores=tuple(scores),
            )

        items = list(enumerate(splits))
        if n_threads > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                folds = tuple(pool.map(run_fold, items))
        else:
            folds = tuple(run_fold(item) for item in items)
        reports.append(
            EvalReport(
                name=spec.name,
                model=spec.descriptor(),
                chance=chance_score(partition),
                folds=folds,
            )
        )
    return reports


# ---------------------------------------------------------------------------
# Term contrast
# ---------------------------------------------------------------------------


def term_contrast(model: EncoderModel, corpus_texts, term: str) -> DensityVolume:
    """Voxel-wise log-ratio of mean mixed densities: mentioning docs vs all docs.

    A document mentions ``term`` when its vectorized hit count for that
    phrase is positive.  Works from text alone, so the corpus may have no
    coordinates at all.
    """
    texts = list(corpus_texts)
    if not texts:
        raise ValueError("corpus contains zero documents")
    t = model.vocabulary.index_of(term)
    rows = sp.vstack([vectorize(text, model.vocabulary) for text in texts], format="csr")
    mention = np.asarray(rows[:, t].todense()).ravel() > 0
    if not np.any(mention):
        raise ValueError(f"no document mentions {term!r}")
    predicted = np.asarray(rows @ model.beta) + model.intercept
    densities = np.stack(
        [mixed_region_densities(row, model.partition) for row in predicted]
    )
    log_mentioning = np.log(densities[mention].mean(axis=0))
    log_all = np.log(densities.mean(axis=0))
    return region_field(log_mentioning - log_all, model.partition)


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------


def report_json_text(reports, config: dict | None = None) -> str:
    """Deterministic JSON rendering of evaluation reports."""
    payload = {
        "config": config or {},
        "models": [report.to_dict() for report in reports],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def write_report_json(reports, path: str | Path, config: dict | None = None) -> None:
    Path(path).write_text(report_json_text(reports, config), encoding="utf-8")


def write_scores_csv(reports, path: str | Path) -> None:
    """Flat per-document score table: model, fold, doc_id, score."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "fold", "doc_id", "score"])
        for report in reports:
            for fold in report.folds:
                for doc_id, score in zip(fold.doc_ids, fold.scores):
                    writer.writerow([report.name, fold.fold, doc_id, repr(score)])
