"""Input validation helpers shared by the loaders and the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import DataError

__all__ = ["check_rotation", "check_image", "check_labels", "check_bbox"]


def check_rotation(matrix: np.ndarray, tol: float = 1e-3, context: str = "pose") -> None:
    r = np.asarray(matrix, dtype=np.float64)
    if r.shape != (3, 3):
        raise DataError(f"{context}: rotation block must be 3x3, got {r.shape}")
    err = np.abs(r @ r.T - np.eye(3)).max()
    if err > tol:
        raise DataError(f"{context}: rotation block not orthonormal (error {err:.2e})")
    if np.linalg.det(r) < 0:
        raise DataError(f"{context}: rotation block has negative determinant (reflection)")


def check_image(img: np.ndarray, context: str = "image") -> None:
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise DataError(f"{context}: expected HxWx3 array, got {a.shape}")
    if not np.isfinite(a).all():
        raise DataError(f"{context}: contains non-finite values")
    if a.min() < -1e-6 or a.max() > 1 + 1e-6:
        raise DataError(f"{context}: values outside [0, 1]")


def check_labels(labels: np.ndarray, context: str = "labels") -> None:
    a = np.asarray(labels)
    if a.ndim != 2:
        raise DataError(f"{context}: expected HxW array, got {a.shape}")
    if a.min() < 0:
        raise DataError(f"{context}: negative labels")


def check_bbox(bbox_min, bbox_max) -> None:
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,):
        raise DataError("bbox corners must be 3-vectors")
    if not (lo < hi).all():
        raise DataError("bbox min must be strictly below bbox max per axis")
