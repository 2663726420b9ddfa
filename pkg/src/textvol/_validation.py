"""Small input-validation helpers used across the package."""

from __future__ import annotations

import numpy as np


def check_positive(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return value


def as_points(coords, *, allow_empty: bool = False) -> np.ndarray:
    """Coerce to a (c, 3) float64 array of millimeter coordinates."""
    points = np.asarray(coords, dtype=np.float64)
    if points.size == 0:
        points = points.reshape(0, 3)
    if points.ndim == 1 and points.shape[0] == 3:
        points = points.reshape(1, 3)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"coordinates must have shape (c, 3), got {points.shape}")
    if not allow_empty and points.shape[0] == 0:
        raise ValueError("coordinate list is empty")
    if not np.all(np.isfinite(points)):
        raise ValueError("coordinates contain non-finite values")
    return points


def check_affine(affine) -> np.ndarray:
    mat = np.asarray(affine, dtype=np.float64)
    if mat.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("affine contains non-finite values")
    if abs(np.linalg.det(mat[:3, :3])) < 1e-12:
        raise ValueError("affine upper-left 3x3 block is singular")
    return mat


def check_2d(name: str, values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
