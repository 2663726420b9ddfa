"""Synthetic corpora with planted term-to-region associations.

Each document samples a handful of active vocabulary terms, emits them as
its text, and draws coordinates from the mixture its term frequencies
induce through a planted coefficient table: a region is chosen per
coordinate, a point is placed uniformly inside it, then jittered.  A
configurable fraction of coordinates is scattered uniformly over the whole
foreground instead, creating the heavy-tailed regime where the
least-deviations loss should beat least squares.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .text_features import Document, Vocabulary
from .volume_space import ATLAS, Partition, build_voxel_partition


@dataclass(frozen=True)
class NoiseModel:
    """Coordinate jitter plus a uniform-outlier fraction."""

    kind: str = "none"  # "none" | "gaussian" | "laplace"
    scale_mm: float = 0.0
    outlier_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "laplace"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.scale_mm < 0:
            raise ValueError("scale_mm must be nonnegative")


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings; beta_star rows are per-term region distributions."""

    partition: Partition
    vocabulary: Vocabulary
    beta_star: np.ndarray  # (d, m), rows nonnegative and summing to 1
    n_docs: int = 100
    coords_per_doc: int = 20
    tokens_per_doc: tuple[int, int] = (10, 30)
    terms_per_doc: tuple[int, int] = (1, 3)
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0

    def __post_init__(self):
        beta = np.asarray(self.beta_star, dtype=np.float64)
        if beta.shape != (len(self.vocabulary), self.partition.n_regions):
            raise ValueError(
                f"beta_star shape {beta.shape} does not match "
                f"(d={len(self.vocabulary)}, m={self.partition.n_regions})"
            )
        if beta.min() < 0:
            raise ValueError("beta_star rows must be nonnegative")
        if not np.allclose(beta.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("beta_star rows must sum to 1")
        beta.setflags(write=False)
        object.__setattr__(self, "beta_star", beta)
        if self.n_docs < 1 or self.coords_per_doc < 1:
            raise ValueError("n_docs and coords_per_doc must be positive")


def make_vocabulary(d: int) -> Vocabulary:
    """d distinct single-token synthetic phrases."""
    if d < 1:
        raise ValueError("vocabulary size must be positive")
    return Vocabulary.from_phrases([f"term{i:03d}" for i in range(d)])


def planted_coefficients(d: int, m: int) -> np.ndarray:
    """One-hot rows: term t loads entirely on region (t mod m) + 1."""
    beta = np.zeros((d, m))
    beta[np.arange(d), np.arange(d) % m] = 1.0
    return beta


def block_atlas(bounding_box_mm, voxel_size_mm: float, blocks, labels) -> Partition:
    """Atlas partition cutting a voxel grid into axis-aligned blocks."""
    grid = build_voxel_partition(bounding_box_mm, voxel_size_mm)
    nx, ny, nz = grid.shape
    bx, by, bz = blocks
    m = bx * by * bz
    labels = tuple(labels)
    if len(labels) != m:
        raise ValueError(f"need {m} labels for {blocks} blocks, got {len(labels)}")
    ix = np.minimum(np.arange(nx) * bx // nx, bx - 1)
    iy = np.minimum(np.arange(ny) * by // ny, by - 1)
    iz = np.minimum(np.arange(nz) * bz // nz, bz - 1)
    region = (
        1
        + (ix[:, None, None] * by + iy[None, :, None]) * bz
        + iz[None, None, :]
    ).astype(np.int32)
    counts = np.bincount(region.ravel(), minlength=m + 1)[1:]
    volumes = counts.astype(np.float64) * grid.voxel_volume_mm3
    return Partition(
        kind=ATLAS,
        region_of_voxel=region,
        affine=grid.affine,
        volumes=volumes,
        labels=labels,
    )


def _region_voxel_lists(partition: Partition) -> list[np.ndarray]:
    flat = partition.region_of_voxel.ravel(order="C")
    order = np.argsort(flat, kind="stable")
    sorted_labels = flat[order]
    lists = []
    for k in range(1, partition.n_regions + 1):
        lo = np.searchsorted(sorted_labels, k, side="left")
        hi = np.searchsorted(sorted_labels, k, side="right")
        lists.append(order[lo:hi])
    return lists


def _uniform_point_in_voxels(partition, voxel_pool, rng) -> np.ndarray:
    flat = voxel_pool[rng.integers(len(voxel_pool))]
    ijk = np.array(np.unravel_index(flat, partition.shape), dtype=np.float64)
    ijk += rng.random(3)
    return partition.affine[:3, :3] @ ijk + partition.affine[:3, 3]


def generate_corpus(spec: SynthSpec) -> list[Document]:
    """Deterministic synthetic corpus: per-document generators derive from the seed."""
    partition = spec.partition
    beta = spec.beta_star
    m = partition.n_regions
    region_voxels = _region_voxel_lists(partition)
    all_voxels = np.flatnonzero(partition.region_of_voxel.ravel(order="C"))
    n_outliers = int(round(spec.noise.outlier_fraction * spec.coords_per_doc))

    docs = []
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_docs)
    for i, seq in enumerate(seeds):
        rng = np.random.default_rng(seq)
        n_active = int(rng.integers(spec.terms_per_doc[0], spec.terms_per_doc[1] + 1))
        active = rng.choice(len(spec.vocabulary), size=n_active, replace=False)
        weights = rng.dirichlet(np.ones(n_active))
        length = int(rng.integers(spec.tokens_per_doc[0], spec.tokens_per_doc[1] + 1))
        token_ids = rng.choice(active, size=length, p=weights)
        text = " ".join(spec.vocabulary.phrases[t] for t in token_ids)

        counts = np.bincount(token_ids, minlength=len(spec.vocabulary)).astype(np.float64)
        mixture = counts @ beta
        mixture /= mixture.sum()

        points = []
        for k in rng.choice(m, size=spec.coords_per_doc - n_outliers, p=mixture):
            point = _uniform_point_in_voxels(partition, region_voxels[k], rng)
            if spec.noise.kind == "gaussian" and spec.noise.scale_mm > 0:
                point = point + rng.normal(0.0, spec.noise.scale_mm, 3)
            elif spec.noise.kind == "laplace" and spec.noise.scale_mm > 0:
                point = point + rng.laplace(0.0, spec.noise.scale_mm, 3)
            points.append(point)
        for _ in range(n_outliers):
            points.append(_uniform_point_in_voxels(partition, all_voxels, rng))
        docs.append(
            Document(doc_id=f"synth-{i:05d}", text=text, coordinates=np.array(points))
        )
    return docs


def ground_truth_dict(spec: SynthSpec) -> dict:
    """Planted associations and generator settings, for test assertions."""
    return {
        "seed": spec.seed,
        "n_docs": spec.n_docs,
        "coords_per_doc": spec.coords_per_doc,
        "tokens_per_doc": list(spec.tokens_per_doc),
        "terms_per_doc": list(spec.terms_per_doc),
        "noise": {
            "kind": spec.noise.kind,
            "scale_mm": spec.noise.scale_mm,
            "outlier_fraction": spec.noise.outlier_fraction,
        },
        "partition": spec.partition.fingerprint,
        "vocabulary": list(spec.vocabulary.phrases),
        "beta_star": [[float(v) for v in row] for row in spec.beta_star],
        "planted_region": [int(np.argmax(row) + 1) for row in spec.beta_star],
    }


def save_ground_truth(spec: SynthSpec, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(ground_truth_dict(spec), indent=2, sort_keys=True), encoding="utf-8"
    )
