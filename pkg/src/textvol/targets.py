"""Assembly of the n x m target matrix and its loss-dependent rescaling.

The squared-error loss on densities factorizes into a volume-weighted sum
over regions, which after the change of variables amounts to dividing both
targets and coefficients by sqrt(volume); the absolute-error loss cancels
the volumes exactly, so its targets are used as-is.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from ._container import ContainerError, read_container, write_container
from .density import KdeConfig, build_kernel_block, estimate_targets
from .volume_space import VOXEL_GRID, Partition, locate_many

L1 = "l1"
L2 = "l2"


@dataclass(frozen=True)
class TargetMatrix:
    """Plugin-estimator coefficients, one row per training document."""

    matrix: np.ndarray  # (n, m) float64
    partition: Partition
    kde: KdeConfig | None = None
    doc_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("target matrix must be 2-dimensional")
        if matrix.shape[1] != self.partition.n_regions:
            raise ValueError(
                f"target matrix has {matrix.shape[1]} columns for a partition "
                f"with {self.partition.n_regions} regions"
            )
        if matrix.size and matrix.min() < 0:
            raise ValueError("plugin targets must be nonnegative")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def m(self) -> int:
        return self.matrix.shape[1]

    @cached_property
    def column_means(self) -> np.ndarray:
        means = self.matrix.mean(axis=0)
        means.setflags(write=False)
        return means

    def centered(self) -> np.ndarray:
        """Columns centered by their means (the dual solver's target)."""
        return self.matrix - self.column_means

    def subset(self, rows) -> "TargetMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        ids = tuple(self.doc_ids[i] for i in rows) if self.doc_ids is not None else None
        return TargetMatrix(
            matrix=self.matrix[rows], partition=self.partition, kde=self.kde, doc_ids=ids
        )


@dataclass(frozen=True)
class RescaledTargets:
    """Loss-specific view of a target matrix.

    ``column_scale`` maps fitted coefficients back to the raw target basis:
    ``beta[:, k] = beta_rescaled[:, k] * column_scale[k]``.
    """

    matrix: np.ndarray
    column_scale: np.ndarray
    loss: str


def has_in_brain_coordinates(partition: Partition, doc) -> bool:
    if doc.n_coordinates == 0:
        return False
    return bool(np.any(locate_many(partition, doc.coordinates) > 0))


def training_documents(corpus, partition: Partition) -> list:
    """Documents usable for fitting: at least one in-brain coordinate."""
    return [doc for doc in corpus if has_in_brain_coordinates(partition, doc)]


def build_targets(
    corpus,
    partition: Partition,
    kde_config: KdeConfig | None = None,
    n_threads: int = 1,
) -> TargetMatrix:
    """Stack per-document plugin rows in corpus order.

    Every document must report at least one coordinate; filter with
    :func:`training_documents` first if the corpus mixes in text-only records.
    """
    docs = list(corpus)
    if not docs:
        raise ValueError("corpus contains zero documents")
    empty = [doc.doc_id for doc in docs if doc.n_coordinates == 0]
    if empty:
        raise ValueError(f"documents without coordinates cannot be training targets: {empty[:5]}")
    config = kde_config or KdeConfig()
    kernel = None
    if partition.kind == VOXEL_GRID:
        kernel = build_kernel_block(partition.shape, partition.voxel_sizes_mm, config)

    def one_row(doc):
        return estimate_targets(partition, doc.coordinates, config, kernel=kernel)

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            rows = list(pool.map(one_row, docs))
    else:
        rows = [one_row(doc) for doc in docs]
    return TargetMatrix(
        matrix=np.vstack(rows),
        partition=partition,
        kde=config,
        doc_ids=tuple(doc.doc_id for doc in docs),
    )


def rescale_for_loss(targets: TargetMatrix, loss: str, partition: Partition | None = None) -> RescaledTargets:
    """Loss-specific target view.

    ``l2``: divide column k by sqrt(v_k); fitted coefficients live in the
    rescaled basis and map back through the recorded column scale.
    ``l1``: identity, because the volume weights cancel against the
    per-region density normalization.
    """
    part = partition if partition is not None else targets.partition
    if loss == L2:
        scale = np.sqrt(part.volumes)
        return RescaledTargets(matrix=targets.matrix / scale, column_scale=scale, loss=L2)
    if loss == L1:
        return RescaledTargets(
            matrix=targets.matrix, column_scale=np.ones(part.n_regions), loss=L1
        )
    raise ValueError(f"unknown loss {loss!r}; expected '{L1}' or '{L2}'")


# ---------------------------------------------------------------------------
# Target cache
# ---------------------------------------------------------------------------

_TARGETS_KIND = "TARGETS"


def save_targets(targets: TargetMatrix, path: str | Path, corpus_fingerprint: str) -> None:
    """Cache the dense rows keyed by corpus, partition, and KDE config."""
    meta = {
        "corpus": corpus_fingerprint,
        "partition": targets.partition.fingerprint,
        "kde": targets.kde.fingerprint_dict() if targets.kde else None,
        "doc_ids": list(targets.doc_ids) if targets.doc_ids else None,
    }
    write_container(path, _TARGETS_KIND, meta, [("matrix", targets.matrix, "<f4")])


def load_targets(
    path: str | Path,
    partition: Partition,
    corpus_fingerprint: str,
    kde_config: KdeConfig | None = None,
) -> TargetMatrix:
    meta, arrays = read_container(path, _TARGETS_KIND)
    if meta["corpus"] != corpus_fingerprint:
        raise ContainerError(f"{path}: target cache was built from a different corpus")
    if meta["partition"] != partition.fingerprint:
        raise ContainerError(f"{path}: target cache was built for a different partition")
    config = kde_config or KdeConfig()
    if meta["kde"] is not None and meta["kde"] != config.fingerprint_dict():
        raise ContainerError(f"{path}: target cache was built with a different KDE config")
    doc_ids = tuple(meta["doc_ids"]) if meta.get("doc_ids") else None
    return TargetMatrix(
        matrix=arrays["matrix"].astype(np.float64),
        partition=partition,
        kde=config,
        doc_ids=doc_ids,
    )
