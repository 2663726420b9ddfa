"""Spatial partitions of a 3D volume: voxel grids, labeled atlases, and volume I/O.

A :class:`Partition` decomposes the grid into ``m`` disjoint regions with
positive volumes, plus a background region 0 covering masked-out and
out-of-grid space.  Point-to-region lookup uses simple binning with the
half-open convention ``i*delta <= x < (i+1)*delta`` on every axis, so a
point exactly on a voxel face belongs to the voxel whose interval starts
there.

Volumes are stored in a small binary container (see :mod:`textvol._container`)
and can optionally be exported as single-file NIfTI-1 images.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from ._container import ContainerError, read_container, sha256_hex, write_container
from ._validation import as_points, check_affine, check_positive
from .text_features import normalize_phrase

VOXEL_GRID = "voxel-grid"
ATLAS = "atlas"


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DensityVolume:
    """A scalar field over a grid, with voxel-to-mm affine geometry.

    ``values[i, j, k]`` is the field at the voxel whose mm extent is the
    half-open box starting at ``affine @ (i, j, k, 1)``.
    """

    values: np.ndarray  # (nx, ny, nz) float64
    affine: np.ndarray  # (4, 4) float64

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError(f"volume values must be 3-dimensional, got shape {values.shape}")
        affine = check_affine(self.affine)
        values.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "affine", affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    @property
    def voxel_sizes_mm(self) -> np.ndarray:
        """Edge length of a voxel along each grid axis (mm)."""
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def integral(self) -> float:
        """Sum of values times voxel volume (mass for a pdf field)."""
        return float(self.values.sum() * self.voxel_volume_mm3)


@dataclass(frozen=True)
class Partition:
    """Disjoint decomposition of the grid into regions 1..m plus background 0."""

    kind: str
    region_of_voxel: np.ndarray  # (nx, ny, nz) int32 labels in 0..m
    affine: np.ndarray  # (4, 4) float64
    volumes: np.ndarray  # (m,) float64, mm^3
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in (VOXEL_GRID, ATLAS):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        region = np.asarray(self.region_of_voxel, dtype=np.int32)
        if region.ndim != 3:
            raise ValueError("region_of_voxel must be 3-dimensional")
        affine = check_affine(self.affine)
        volumes = np.asarray(self.volumes, dtype=np.float64)
        m = volumes.shape[0]
        if m < 1:
            raise ValueError("partition has no regions")
        if region.min() < 0 or region.max() > m:
            raise ValueError(f"voxel labels must lie in 0..{m}")
        if np.any(volumes <= 0):
            raise ValueError("all region volumes must be positive")
        if self.labels is not None and len(self.labels) != m:
            raise ValueError(f"expected {m} labels, got {len(self.labels)}")
        voxvol = abs(np.linalg.det(affine[:3, :3]))
        n_foreground = int(np.count_nonzero(region))
        if not np.isclose(volumes.sum(), n_foreground * voxvol, rtol=1e-9, atol=0.0):
            raise ValueError("region volumes do not sum to foreground voxel count x voxel volume")
        for arr in (region, affine, volumes):
            arr.setflags(write=False)
        object.__setattr__(self, "region_of_voxel", region)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "volumes", volumes)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.region_of_voxel.shape

    @property
    def n_regions(self) -> int:
        return self.volumes.shape[0]

    @property
    def voxel_volume_mm3(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    @property
    def voxel_sizes_mm(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def brain_volume_mm3(self) -> float:
        """Total foreground volume V = sum of region volumes."""
        return float(self.volumes.sum())

    @cached_property
    def region_voxel_flat_index(self) -> np.ndarray:
        """For voxel-grid partitions: C-order flat voxel index of each region."""
        if self.kind != VOXEL_GRID:
            raise ValueError("region_voxel_flat_index is defined for voxel-grid partitions only")
        flat = self.region_of_voxel.ravel(order="C")
        positions = np.flatnonzero(flat)
        index = np.empty(self.n_regions, dtype=np.int64)
        index[flat[positions] - 1] = positions
        index.setflags(write=False)
        return index

    @cached_property
    def fingerprint(self) -> str:
        label_bytes = "\n".join(self.labels).encode("utf-8") if self.labels else b""
        return sha256_hex(
            self.kind.encode("ascii"),
            np.asarray(self.shape, dtype="<i8").tobytes(),
            self.affine.astype("<f8").tobytes(),
            self.region_of_voxel.astype("<i4").tobytes(),
            self.volumes.astype("<f8").tobytes(),
            label_bytes,
        )


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def build_voxel_partition(
    bounding_box_mm,
    voxel_size_mm: float,
    mask: DensityVolume | None = None,
) -> Partition:
    """Cubic-voxel partition of an axis-aligned box; each kept voxel is a region.

    Parameters
    ----------
    bounding_box_mm : array-like (2, 3)
        Lower and upper corners in mm; the grid covers whole voxels starting
        at the lower corner.
    voxel_size_mm : float
        Edge length delta of the cubic voxels (mm).
    mask : DensityVolume, optional
        Nonzero entries mark in-brain voxels; must match the grid shape.
        Without a mask every voxel in the box is a region.
    """
    delta = check_positive("voxel_size_mm", voxel_size_mm)
    box = np.asarray(bounding_box_mm, dtype=np.float64)
    if box.shape != (2, 3):
        raise ValueError(f"bounding box must have shape (2, 3), got {box.shape}")
    lower, upper = box
    if np.any(upper <= lower):
        raise ValueError("bounding box corners must satisfy lower < upper on every axis")
    shape = tuple(int(np.floor((upper[a] - lower[a]) / delta + 1e-9)) for a in range(3))
    if min(shape) < 1:
        raise ValueError("bounding box is smaller than one voxel")

    affine = np.eye(4)
    affine[0, 0] = affine[1, 1] = affine[2, 2] = delta
    affine[:3, 3] = lower

    if mask is not None:
        if mask.values.shape != shape:
            raise ValueError(f"mask shape {mask.values.shape} does not match grid shape {shape}")
        keep = mask.values != 0
    else:
        keep = np.ones(shape, dtype=bool)
    m = int(keep.sum())
    if m == 0:
        raise ValueError("mask keeps no voxels")
    region = np.zeros(shape, dtype=np.int32)
    region[keep] = np.arange(1, m + 1, dtype=np.int32)
    volumes = np.full(m, delta**3, dtype=np.float64)
    return Partition(kind=VOXEL_GRID, region_of_voxel=region, affine=affine, volumes=volumes)


def load_atlas_partition(label_volume: DensityVolume, label_names) -> Partition:
    """Partition from an integer label volume plus one name per region.

    Labels must lie in ``0..len(label_names)`` and every region 1..m must be
    non-empty.  Names are normalized so they can be matched against
    vocabulary phrases.
    """
    raw = label_volume.values
    region = np.rint(raw).astype(np.int32)
    if not np.allclose(raw, region, atol=1e-6):
        raise ValueError("atlas label volume has non-integer values")
    names = tuple(normalize_phrase(name) for name in label_names)
    m = len(names)
    if m == 0:
        raise ValueError("atlas has no region names")
    if region.min() < 0:
        raise ValueError("atlas labels must be nonnegative")
    if region.max() > m:
        raise ValueError(f"atlas label {int(region.max())} exceeds the {m} provided names")
    counts = np.bincount(region.ravel(), minlength=m + 1)[1:]
    if np.any(counts == 0):
        missing = [k + 1 for k in np.flatnonzero(counts == 0)]
        raise ValueError(f"atlas regions with no voxels: {missing}")
    voxvol = abs(np.linalg.det(label_volume.affine[:3, :3]))
    volumes = counts.astype(np.float64) * voxvol
    return Partition(
        kind=ATLAS,
        region_of_voxel=region,
        affine=label_volume.affine,
        volumes=volumes,
        labels=names,
    )


# ---------------------------------------------------------------------------
# Point lookup
# ---------------------------------------------------------------------------


def voxel_indices(affine: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Floor voxel index of each point plus an in-grid mask precursor.

    Returns integer indices (c, 3) and the fractional voxel coordinates used
    to compute them.  Indices follow ``i*delta <= x < (i+1)*delta``: a point
    on a voxel face maps to the voxel whose interval starts there.
    """
    offset = points - affine[:3, 3]
    linear = affine[:3, :3]
    if np.count_nonzero(linear - np.diag(np.diagonal(linear))) == 0:
        # Diagonal affines use exact IEEE division so that box faces at
        # representable coordinates land on the correct side of the boundary.
        frac = offset / np.diagonal(linear)
    else:
        frac = np.linalg.solve(linear, offset.T).T
    return np.floor(frac).astype(np.int64), frac


def locate_many(partition: Partition, points_mm) -> np.ndarray:
    """Region label (0..m) of each point; out-of-grid points map to 0."""
    points = as_points(points_mm, allow_empty=True)
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int32)
    idx, _ = voxel_indices(partition.affine, points)
    shape = np.asarray(partition.shape, dtype=np.int64)
    inside = np.all((idx >= 0) & (idx < shape), axis=1)
    labels = np.zeros(points.shape[0], dtype=np.int32)
    if np.any(inside):
        sel = idx[inside]
        labels[inside] = partition.region_of_voxel[sel[:, 0], sel[:, 1], sel[:, 2]]
    return labels


def locate(partition: Partition, point_mm) -> int:
    """Region label of a single point under simple binning."""
    return int(locate_many(partition, np.asarray(point_mm, dtype=np.float64).reshape(1, 3))[0])


# ---------------------------------------------------------------------------
# Volume I/O
# ---------------------------------------------------------------------------

_VOLUME_KIND = "VOLUME"


def write_volume(vol: DensityVolume, path: str | Path, extra_meta: dict | None = None) -> None:
    """Write in the internal container: float32 payload in x-fastest order."""
    if not np.all(np.isfinite(vol.values)):
        raise ValueError("volume contains non-finite values")
    meta = {
        "shape": list(vol.shape),
        "affine": [float(v) for v in vol.affine.ravel(order="C")],
        "dtype": "<f4",
    }
    if extra_meta:
        meta["extra"] = extra_meta
    payload = vol.values.astype("<f4").ravel(order="F")
    write_container(path, _VOLUME_KIND, meta, [("values", payload, "<f4")])


def read_volume(path: str | Path) -> DensityVolume:
    meta, arrays = read_container(path, _VOLUME_KIND)
    shape = tuple(int(s) for s in meta["shape"])
    affine = np.asarray(meta["affine"], dtype=np.float64).reshape(4, 4)
    if meta.get("dtype") not in ("<f4", "<f8"):
        raise ContainerError(f"{path}: dtype mismatch, got {meta.get('dtype')!r}")
    flat = arrays["values"]
    if flat.size != int(np.prod(shape)):
        raise ContainerError(f"{path}: payload size does not match shape {shape}")
    values = flat.astype(np.float64).reshape(shape, order="F")
    return DensityVolume(values=values, affine=affine)


def write_nifti(vol: DensityVolume, path: str | Path) -> None:
    """Export as a single-file little-endian NIfTI-1 image (float32, sform set)."""
    if not np.all(np.isfinite(vol.values)):
        raise ValueError("volume contains non-finite values")
    nx, ny, nz = vol.shape
    sizes = vol.voxel_sizes_mm

    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)  # sizeof_hdr
    header[38:39] = b"r"  # regular
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", header, 70, 16)  # datatype: float32
    struct.pack_into("<h", header, 72, 32)  # bitpix
    struct.pack_into("<8f", header, 76, 1.0, sizes[0], sizes[1], sizes[2], 0, 0, 0, 0)  # pixdim
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    header[123] = 2  # xyzt_units: mm
    struct.pack_into("<h", header, 252, 0)  # qform_code
    struct.pack_into("<h", header, 254, 1)  # sform_code
    struct.pack_into("<4f", header, 280, *vol.affine[0])  # srow_x
    struct.pack_into("<4f", header, 296, *vol.affine[1])  # srow_y
    struct.pack_into("<4f", header, 312, *vol.affine[2])  # srow_z
    header[344:348] = b"n+1\x00"

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * 4)  # pad to vox_offset
        fh.write(vol.values.astype("<f4").ravel(order="F").tobytes())
