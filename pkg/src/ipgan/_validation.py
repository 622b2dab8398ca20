"""Input checks shared by the estimators and the functional API."""

from __future__ import annotations

import numpy as np


def check_images(X, shape=None, *, name="X", allow_single=True):
    """Return ``X`` as a float32 NHWC batch in [-1, 1].

    A single HWC image is promoted to a batch of one when ``allow_single``.
    ``shape`` is the expected (H, W, C); ``None`` skips the check.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3 and allow_single:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"{name} must be an NHWC image batch, got ndim={X.ndim}")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise ValueError(
            f"{name} has image shape {tuple(X.shape[1:])}, expected {tuple(shape)}"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_labels(y, n_samples, *, name="y", low=None, high=None):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"{name} must be 1-d with {n_samples} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(np.asarray(y, dtype=float) % 1 != 0):
            raise ValueError(f"{name} must hold integer labels")
    y = y.astype(np.int64)
    if low is not None and len(y) and y.min() < low:
        raise ValueError(f"{name} has label {y.min()} below {low}")
    if high is not None and len(y) and y.max() > high:
        raise ValueError(f"{name} has label {y.max()} above {high}")
    return y


def check_contiguous(y, *, name="labels"):
    """Labels must be exactly ``0..N-1`` with every class present."""
    classes = np.unique(y)
    if len(classes) == 0 or classes[0] != 0 or classes[-1] != len(classes) - 1:
        raise ValueError(
            f"{name} are not a contiguous vocabulary 0..N-1 (got {classes[:5].tolist()}...); "
            "remap them first"
        )
    return len(classes)
