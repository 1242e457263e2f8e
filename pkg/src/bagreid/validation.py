"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X) -> np.ndarray:
    """Validate a stack of images as float32 (n, H, W, 3) with H == W."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {arr.shape}")
    if arr.shape[1] != arr.shape[2]:
        raise ValueError(f"images must be square, got {arr.shape[1]}x{arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain non-finite values")
    return arr


def check_pair_stack(X) -> np.ndarray:
    """Validate a stack of image pairs as float32 (n, 2, H, W, 3)."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 5 or arr.shape[1] != 2 or arr.shape[4] != 3:
        raise ValueError(f"expected pairs of shape (n, 2, H, W, 3), got {arr.shape}")
    if arr.shape[2] != arr.shape[3]:
        raise ValueError(f"images must be square, got {arr.shape[2]}x{arr.shape[3]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain non-finite values")
    return arr


def check_pair_labels(y, n_pairs: int) -> np.ndarray:
    """Validate same/different labels as int64 zeros and ones."""
    arr = np.asarray(y)
    if arr.shape != (n_pairs,):
        raise ValueError(f"expected {n_pairs} labels, got shape {arr.shape}")
    arr = arr.astype(np.int64)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("labels must be 0 (different) or 1 (same)")
    return arr
