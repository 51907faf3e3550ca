"""Input checks shared by the estimator front end."""

from __future__ import annotations

import numpy as np

from .data import LABELS
from .exceptions import ContractError, DataError


def check_images(X) -> np.ndarray:
    """Coerce a batch of grayscale images to uint8 ``(N, H, W)``.

    Integer input must lie in [0, 255]; float input is read as intensities
    in [0, 1].
    """
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ContractError(f"expected images of shape (N, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ContractError("empty image batch")
    if X.shape[1] % 32 or X.shape[2] % 32:
        raise ContractError(f"image size {X.shape[1]}x{X.shape[2]} is not divisible by 32")
    if np.issubdtype(X.dtype, np.floating):
        if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
            raise DataError("float images must be finite and lie in [0, 1]")
        return np.rint(X * 255).astype(np.uint8)
    if np.issubdtype(X.dtype, np.integer) or X.dtype == bool:
        if X.min() < 0 or X.max() > 255:
            raise DataError("integer images must lie in [0, 255]")
        return X.astype(np.uint8)
    raise ContractError(f"unsupported image dtype {X.dtype}")


def check_masks(y, X: np.ndarray, num_classes: int = len(LABELS)) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != X.shape:
        raise ContractError(f"masks of shape {y.shape} do not match images of shape {X.shape}")
    if not (np.issubdtype(y.dtype, np.integer) or np.all(np.mod(y, 1) == 0)):
        raise DataError("masks must hold integer labels")
    bad = np.setdiff1d(np.unique(y), np.arange(num_classes))
    if bad.size:
        raise DataError(f"mask label(s) {bad.tolist()} outside 0..{num_classes - 1}")
    return y.astype(np.uint8)
