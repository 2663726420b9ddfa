"""Independent reference implementations used as test oracles.

Everything here recomputes results along a different route than the library
code: dense matrices instead of implicit sparse products, direct triple
sums instead of FFT convolutions, subgradient descent instead of the dual,
and raw struct unpacking instead of the package's writers.
"""

from __future__ import annotations

import struct

import numpy as np
import scipy.sparse as sp


# ---------------------------------------------------------------------------
# KDE
# ---------------------------------------------------------------------------


def naive_binned_kde(counts: np.ndarray, total_weight: float, voxel_sizes, bandwidth: float):
    """Triple-sum KDE over bin counts with the full (untruncated) Gaussian.

    Evaluates sum_w w[i,j,k] * phi_H((i'-i)dx, (j'-j)dy, (k'-k)dz) / c on
    every voxel, O(occupied bins x voxels).
    """
    sizes = np.broadcast_to(np.asarray(voxel_sizes, dtype=float), (3,))
    shape = counts.shape
    out = np.zeros(shape)
    norm = (2.0 * np.pi) ** -1.5 / (bandwidth**3 * sizes.prod())
    axes = [np.arange(n) for n in shape]
    for i, j, k in zip(*np.nonzero(counts)):
        di = (axes[0] - i) / bandwidth
        dj = (axes[1] - j) / bandwidth
        dk = (axes[2] - k) / bandwidth
        out += (
            counts[i, j, k]
            * norm
            * np.exp(
                -0.5
                * (
                    di[:, None, None] ** 2
                    + dj[None, :, None] ** 2
                    + dk[None, None, :] ** 2
                )
            )
        )
    return out / total_weight


# ---------------------------------------------------------------------------
# Centered designs and LAD
# ---------------------------------------------------------------------------


def dense_standardized_design(features) -> np.ndarray:
    """(X - mean) / scale materialized densely."""
    X = np.asarray(features.matrix.todense())
    return (X - features.means) / features.scales


def dense_dual_objective(nu, Z, Yc, lam):
    """Dual objective and gradient from an explicit dense design."""
    K = Z.T @ nu
    g = float(np.sum(nu * Yc) - np.sum(K * K) / (4.0 * lam))
    grad = Yc - Z @ K / (2.0 * lam)
    return g, grad


def lad_primal(Z, Yc, B, lam) -> float:
    return float(np.abs(Yc - Z @ B).sum() + lam * np.sum(B * B))


def averaged_subgradient_lad(Z, Yc, lam, n_iters=1_000_000):
    """Primal oracle: subgradient descent with weighted (Polyak-style) averaging.

    Steps 1/(lam*(t+1)) exploit the 2*lam strong convexity of the penalty;
    iterates are averaged with weight t, which gives an O(1/T) objective
    gap for strongly convex nonsmooth problems.
    """
    d, m = Z.shape[1], Yc.shape[1]
    B = np.zeros((d, m))
    avg = np.zeros((d, m))
    weight_sum = 0.0
    for t in range(1, n_iters + 1):
        residual = Yc - Z @ B
        grad = -Z.T @ np.sign(residual) + 2.0 * lam * B
        B -= grad / (lam * (t + 1))
        weight_sum += t
        avg += t * (B - avg) / weight_sum
    return avg


def random_sparse_instance(rng, n, d, m, density=0.3, lam_range=(1.0, 4.0)):
    """Nonnegative sparse design + simplex-like targets for solver tests."""
    X = sp.random(n, d, density=density, random_state=np.random.RandomState(rng.integers(2**31)), format="csr")
    X.data = np.abs(X.data)
    # guarantee a couple of entries per column so scales stay well away from 0
    filler_rows = rng.integers(0, n, size=(2, d))
    for r in filler_rows:
        X += sp.csr_matrix((rng.uniform(0.2, 1.0, d), (r, np.arange(d))), shape=(n, d))
    Y = rng.dirichlet(np.ones(m), size=n) * rng.uniform(0.5, 1.0, size=(n, 1))
    lam = float(rng.uniform(*lam_range))
    return X.tocsr(), Y, lam


# ---------------------------------------------------------------------------
# Ridge
# ---------------------------------------------------------------------------


def closed_form_ridge(Xc: np.ndarray, Yc: np.ndarray, lam: float) -> np.ndarray:
    """(Xc' Xc + lam I)^-1 Xc' Yc on explicit dense centered data."""
    d = Xc.shape[1]
    return np.linalg.solve(Xc.T @ Xc + lam * np.eye(d), Xc.T @ Yc)


def scalar_ridge(x: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Univariate centered ridge: sum((x-xm)(y-ym)) / (sum((x-xm)^2) + lam)."""
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc @ yc) / (xc @ xc + lam))


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------


def parse_nifti(path):
    """Minimal independent NIfTI-1 reader: header fields plus the data block."""
    raw = open(path, "rb").read()
    if len(raw) < 352:
        raise ValueError("file too short for a NIfTI-1 image")
    fields = {
        "sizeof_hdr": struct.unpack_from("<i", raw, 0)[0],
        "dim": struct.unpack_from("<8h", raw, 40),
        "datatype": struct.unpack_from("<h", raw, 70)[0],
        "bitpix": struct.unpack_from("<h", raw, 72)[0],
        "pixdim": struct.unpack_from("<8f", raw, 76),
        "vox_offset": struct.unpack_from("<f", raw, 108)[0],
        "sform_code": struct.unpack_from("<h", raw, 254)[0],
        "srow_x": struct.unpack_from("<4f", raw, 280),
        "srow_y": struct.unpack_from("<4f", raw, 296),
        "srow_z": struct.unpack_from("<4f", raw, 312),
        "magic": raw[344:348],
    }
    offset = int(fields["vox_offset"])
    nx, ny, nz = fields["dim"][1:4]
    data = np.frombuffer(raw, dtype="<f4", count=nx * ny * nz, offset=offset)
    fields["data"] = data.reshape((nx, ny, nz), order="F")
    return fields
