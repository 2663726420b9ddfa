"""Squared-loss fits: volume-rescaled ridge and the diagonal label-constrained model.

Both fit centered data: features and targets are centered by their column
means, the coefficients are solved from the ridge normal equations (or LSQR
for very wide vocabularies), and predictions add the target means back.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._validation import check_positive
from .targets import L2, RescaledTargets, TargetMatrix, rescale_for_loss
from .text_features import FeatureMatrix, Vocabulary
from .volume_space import Partition

# Above this vocabulary size the dense normal equations give way to LSQR.
DIRECT_SOLVE_MAX_FEATURES = 4096

_LSQR_TOL = 1e-12


@dataclass(frozen=True)
class RidgeModel:
    """Fitted coefficients in both the raw and the volume-rescaled basis.

    ``beta[:, k] = beta_rescaled[:, k] * column_scale[k]`` and predictions in
    raw target units are ``intercept + (x - x_mean) @ beta``.
    """

    beta: np.ndarray  # (d, m), raw target basis
    beta_rescaled: np.ndarray  # (d, m), basis the solver worked in
    intercept: np.ndarray  # (m,), raw target column means
    column_scale: np.ndarray  # (m,)
    lam: float
    loss: str  # "ridge" | "label"


def _centered_gram(features: FeatureMatrix) -> np.ndarray:
    X = features.matrix
    gram = np.asarray((X.T @ X).todense())
    gram -= features.n * np.outer(features.means, features.means)
    return gram


def _centered_operator(features: FeatureMatrix) -> spla.LinearOperator:
    X = features.matrix
    means = features.means

    def matvec(v):
        return X @ v - float(means @ v)

    def rmatvec(u):
        return X.T @ u - means * float(u.sum())

    return spla.LinearOperator(shape=X.shape, matvec=matvec, rmatvec=rmatvec)


def fit_ridge(
    features: FeatureMatrix,
    rescaled_targets: RescaledTargets,
    lam: float,
    direct_threshold: int = DIRECT_SOLVE_MAX_FEATURES,
) -> RidgeModel:
    """Ridge fit of the rescaled targets on the centered sparse design.

    Solves ``argmin ||Yc - Xc b||^2 + lam * ||b||^2`` by normal equations when
    the vocabulary is small enough, otherwise by per-column LSQR with
    ``damp = sqrt(lam)``.  Note ``Xc.T @ Yc == X.T @ Yc`` because the centered
    target columns sum to zero, so the sparse matrix is used unmodified.
    """
    check_positive("lam", lam)
    Y = np.asarray(rescaled_targets.matrix, dtype=np.float64)
    if Y.shape[0] != features.n:
        raise ValueError(f"{Y.shape[0]} target rows for {features.n} feature rows")

    # target columns decouple; processing them one contiguous column at a
    # time keeps joint and per-column fits on one bitwise-identical path
    d = features.d
    factor = None
    op = None
    if d <= direct_threshold:
        gram = _centered_gram(features)
        gram[np.diag_indices_from(gram)] += lam
        factor = scipy.linalg.cho_factor(gram)
    else:
        op = _centered_operator(features)

    cols = []
    y_means = np.empty(Y.shape[1])
    for k in range(Y.shape[1]):
        y_col = np.ascontiguousarray(Y[:, k])
        y_means[k] = y_col.mean()
        y_centered = y_col - y_means[k]
        if factor is not None:
            rhs = features.matrix.T @ y_centered
            cols.append(scipy.linalg.cho_solve(factor, rhs))
        else:
            result = spla.lsqr(
                op,
                y_centered,
                damp=np.sqrt(lam),
                atol=_LSQR_TOL,
                btol=_LSQR_TOL,
                conlim=1e14,
                iter_lim=8 * (d + features.n),
            )
            cols.append(result[0])
    beta_rescaled = np.stack(cols, axis=1)

    scale = np.asarray(rescaled_targets.column_scale, dtype=np.float64)
    beta = beta_rescaled * scale[None, :]
    intercept = y_means * scale
    return RidgeModel(
        beta=beta,
        beta_rescaled=beta_rescaled,
        intercept=intercept,
        column_scale=scale,
        lam=float(lam),
        loss="ridge",
    )


def fit_volume_ridge(
    features: FeatureMatrix,
    targets: TargetMatrix,
    lam: float,
    direct_threshold: int = DIRECT_SOLVE_MAX_FEATURES,
) -> RidgeModel:
    """Convenience wrapper: rescale plugin targets for the squared loss, then fit."""
    return fit_ridge(features, rescale_for_loss(targets, L2), lam, direct_threshold)


def fit_label_constrained(
    features: FeatureMatrix,
    targets: TargetMatrix,
    partition: Partition,
    lam: float,
    vocabulary: Vocabulary,
) -> RidgeModel:
    """Diagonal model: region k depends only on the frequency of its own label.

    Each region with a label present in the vocabulary gets one univariate
    centered ridge coefficient ``sum((x - xm) * (y - ym)) / (sum((x - xm)^2) + lam)``;
    labels missing from the vocabulary leave the coefficient at zero with a
    warning.  Unlabeled partitions (voxel grids) are rejected.
    """
    check_positive("lam", lam)
    if partition.labels is None:
        raise ValueError("label-constrained fitting requires a labeled atlas partition")
    if targets.m != partition.n_regions:
        raise ValueError("targets and partition disagree on the region count")
    n = features.n
    X = features.matrix.tocsc()
    Y = targets.matrix
    y_means = targets.column_means

    beta = np.zeros((features.d, targets.m))
    for k, label in enumerate(partition.labels):
        t = vocabulary.index.get(label)
        if t is None:
            warnings.warn(f"region label {label!r} is not in the vocabulary; coefficient set to 0")
            continue
        col = X.getcol(t)
        x_mean = features.means[t]
        sxx = float(col.multiply(col).sum()) - n * x_mean**2
        sxy = float((col.T @ Y[:, k]).item()) - n * x_mean * y_means[k]
        beta[t, k] = sxy / (sxx + lam)

    ones = np.ones(targets.m)
    return RidgeModel(
        beta=beta,
        beta_rescaled=beta,
        intercept=y_means.copy(),
        column_scale=ones,
        lam=float(lam),
        loss="label",
    )
