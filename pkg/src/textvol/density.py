"""Per-document spatial target estimation.

Atlas partitions use the plugin estimate: the probability of a region is
the fraction of a document's coordinates that fell inside it.  Voxel grids
smooth the same counts with a truncated-Gaussian kernel density estimate,
computed as an FFT convolution of the binned sample with a wrap-symmetric
kernel block:

1. bin each coordinate into its containing voxel (simple binning, half-open
   boundaries, full weight to one voxel);
2. evaluate the Gaussian kernel at integer voxel offsets up to the
   truncation cutoff ``lambda = min(n - 1, floor(radius * h))`` per axis;
3. pad both arrays to ``theta``, the next power of two at or above
   ``n + lambda + 1``, laying the kernel out symmetrically under index
   negation modulo ``theta`` so circular convolution equals the truncated
   linear convolution on the first ``n`` entries;
4. multiply the (real) spectra and invert.

The kernel standard deviation is ``h`` voxels per axis, i.e. ``h * delta``
mm, and the kernel is normalized as a density in mm^-3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from ._validation import as_points, check_positive
from .volume_space import ATLAS, DensityVolume, Partition, locate_many, voxel_indices

# FFT round-off can leave densities slightly negative; anything beyond this
# magnitude would indicate a real bug rather than round-off.
FFT_NEGATIVITY_TOL = 1e-12


@dataclass(frozen=True)
class KdeConfig:
    """Bandwidth and truncation settings for the grid KDE.

    ``bandwidth`` is the dimensionless multiplier h: the kernel standard
    deviation is h times the voxel size on each axis.  The kernel is zeroed
    beyond ``truncation_radius`` standard deviations.
    """

    bandwidth: float = 1.0
    truncation_radius: float = 5.0
    weight_policy: str = "uniform"

    def __post_init__(self):
        check_positive("bandwidth", self.bandwidth)
        if self.truncation_radius < 3.0:
            raise ValueError(f"truncation_radius must be >= 3, got {self.truncation_radius}")
        if self.weight_policy not in ("uniform", "per-point"):
            raise ValueError(f"unknown weight_policy {self.weight_policy!r}")

    def fingerprint_dict(self) -> dict:
        return {
            "bandwidth": self.bandwidth,
            "truncation_radius": self.truncation_radius,
            "weight_policy": self.weight_policy,
        }


@dataclass(frozen=True)
class BinnedSample:
    """Per-voxel accumulated sample weights plus the coordinate count c."""

    counts: np.ndarray  # (nx, ny, nz) float64 bin counts w
    affine: np.ndarray
    total_weight: float  # c, including points that fell outside the grid

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.counts.shape


@dataclass(frozen=True)
class KernelBlock:
    """Padded, wrap-symmetric kernel evaluations ready for FFT convolution."""

    values: np.ndarray  # (theta_x, theta_y, theta_z) float64
    cutoffs: tuple[int, int, int]  # lambda per axis
    grid_shape: tuple[int, int, int]

    @property
    def padded_shape(self) -> tuple[int, int, int]:
        return self.values.shape


def truncation_cutoffs(shape, config: KdeConfig) -> tuple[int, int, int]:
    """lambda per axis: min(n - 1, floor(radius * h)), in voxel units."""
    reach = int(np.floor(config.truncation_radius * config.bandwidth))
    return tuple(min(int(n) - 1, reach) for n in shape)


def padded_sizes(shape, cutoffs) -> tuple[int, int, int]:
    """theta per axis: smallest power of two >= n + lambda + 1."""
    return tuple(int(2 ** np.ceil(np.log2(n + lam + 1))) for n, lam in zip(shape, cutoffs))


def kernel_fwhm_mm(config: KdeConfig, voxel_size_mm: float) -> float:
    """Full width at half maximum, 2 * delta * h * sqrt(2 ln 2), in mm."""
    return 2.0 * voxel_size_mm * config.bandwidth * np.sqrt(2.0 * np.log(2.0))


def build_kernel_block(shape, voxel_sizes_mm, config: KdeConfig) -> KernelBlock:
    """Truncated-Gaussian kernel block for an (nx, ny, nz) grid.

    ``voxel_sizes_mm`` may be a scalar or one size per axis.  The block is
    separable: per-axis profiles are evaluated at offsets 0..lambda, mirrored
    into the tail of the padded axis, and multiplied together, which realizes
    the eight-octant symmetric layout.  ``values[0, 0, 0]`` is the kernel
    peak ``(2*pi)**-1.5 / prod(h * delta)``.
    """
    shape = tuple(int(n) for n in shape)
    if min(shape) < 1:
        raise ValueError(f"grid shape must be positive, got {shape}")
    sizes = np.broadcast_to(np.asarray(voxel_sizes_mm, dtype=np.float64), (3,))
    if np.any(sizes <= 0):
        raise ValueError("voxel sizes must be positive")
    cutoffs = truncation_cutoffs(shape, config)
    padded = padded_sizes(shape, cutoffs)

    profiles = []
    for axis in range(3):
        sigma = config.bandwidth * sizes[axis]
        offsets_mm = np.arange(cutoffs[axis] + 1) * sizes[axis]
        gauss = np.exp(-0.5 * (offsets_mm / sigma) ** 2) / (np.sqrt(2.0 * np.pi) * sigma)
        profile = np.zeros(padded[axis])
        profile[: cutoffs[axis] + 1] = gauss
        if cutoffs[axis] >= 1:
            profile[padded[axis] - cutoffs[axis] :] = gauss[1:][::-1]
        profiles.append(profile)

    values = (
        profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]
    )
    return KernelBlock(values=values, cutoffs=cutoffs, grid_shape=shape)


def bin_samples(partition: Partition, coords, weights=None) -> BinnedSample:
    """Accumulate point weights into their containing voxels (simple binning).

    Out-of-grid points contribute nothing to the bin counts but still count
    toward the total c.  Weights default to 1 per point and must be
    nonnegative, summing to the number of coordinates.
    """
    points = as_points(coords, allow_empty=True)
    c = points.shape[0]
    if weights is None:
        w = np.ones(c, dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64).ravel()
        if w.shape[0] != c:
            raise ValueError(f"got {w.shape[0]} weights for {c} coordinates")
        if np.any(w < 0):
            raise ValueError("point weights must be nonnegative")
        if c and not np.isclose(w.sum(), c, rtol=1e-8, atol=1e-8):
            raise ValueError(f"point weights must sum to the coordinate count {c}")
    counts = np.zeros(partition.shape, dtype=np.float64)
    if c:
        idx, _ = voxel_indices(partition.affine, points)
        shape = np.asarray(partition.shape, dtype=np.int64)
        inside = np.all((idx >= 0) & (idx < shape), axis=1)
        if np.any(inside):
            sel = idx[inside]
            np.add.at(counts, (sel[:, 0], sel[:, 1], sel[:, 2]), w[inside])
    return BinnedSample(counts=counts, affine=partition.affine, total_weight=float(c))


def kde_density(
    binned: BinnedSample,
    config: KdeConfig,
    kernel: KernelBlock | None = None,
) -> DensityVolume:
    """FFT convolution of the kernel block with the bin counts, divided by c.

    The first ``n`` entries of the circular convolution equal the truncated
    linear convolution because of the power-of-two padding.  Round-off
    negatives are clamped to zero.
    """
    if binned.total_weight <= 0:
        raise ValueError("cannot estimate a density from zero coordinates")
    shape = binned.shape
    sizes = np.linalg.norm(np.asarray(binned.affine)[:3, :3], axis=0)
    if kernel is None:
        kernel = build_kernel_block(shape, sizes, config)
    elif kernel.grid_shape != shape:
        raise ValueError(
            f"kernel block was built for grid {kernel.grid_shape}, sample grid is {shape}"
        )
    padded = kernel.padded_shape
    weights = np.zeros(padded, dtype=np.float64)
    weights[: shape[0], : shape[1], : shape[2]] = binned.counts
    spectrum = scipy.fft.rfftn(kernel.values) * scipy.fft.rfftn(weights)
    conv = scipy.fft.irfftn(spectrum, s=padded)
    values = conv[: shape[0], : shape[1], : shape[2]] / binned.total_weight
    np.maximum(values, 0.0, out=values)
    return DensityVolume(values=values, affine=binned.affine)


def estimate_targets(
    partition: Partition,
    coords,
    config: KdeConfig,
    kernel: KernelBlock | None = None,
) -> np.ndarray:
    """Plugin target row for one document: probability mass per region.

    Atlas partitions count coordinates per region and divide by c.  Voxel
    grids evaluate the KDE pdf at each region's voxel and multiply by the
    voxel volume.  Mass that leaks to the background or past grid edges is
    not renormalized, so the row sums to at most 1.
    """
    points = as_points(coords)
    if partition.kind == ATLAS:
        labels = locate_many(partition, points)
        hits = np.bincount(labels, minlength=partition.n_regions + 1)[1:]
        return hits.astype(np.float64) / points.shape[0]
    binned = bin_samples(partition, points)
    pdf = kde_density(binned, config, kernel=kernel)
    flat = pdf.values.ravel(order="C")
    return flat[partition.region_voxel_flat_index] * partition.voxel_volume_mm3
