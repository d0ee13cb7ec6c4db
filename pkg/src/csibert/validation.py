"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ConfigError


def check_csi_batch(h) -> np.ndarray:
    """Coerce CSI input to a finite complex ``[n, N_s, N_t, N_r]`` array.

    Accepts an array, a single 3-D tensor, a sequence of tensors or any
    object exposing ``.data`` (``Dataset``, ``CsiTensor``).
    """
    if hasattr(h, "data") and not isinstance(h, np.ndarray):
        h = h.data
    if isinstance(h, (list, tuple)):
        h = np.stack([np.asarray(getattr(t, "data", t)) for t in h])
    h = np.asarray(h)
    if h.ndim == 3:
        h = h[None]
    if h.ndim != 4 or min(h.shape) < 1:
        raise ConfigError(f"expected CSI of shape [n, N_s, N_t, N_r], got {h.shape}")
    if not np.iscomplexobj(h):
        h = h.astype(np.complex128)
    if not np.all(np.isfinite(h)):
        raise ValueError("CSI input contains NaN or Inf")
    return h


def check_feature_batch(X, feature_dim: int | None = None) -> np.ndarray:
    """Coerce features to a finite float64 ``[n, N_s, d]`` array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ConfigError(f"expected features of shape [n, N_s, d], got {X.shape}")
    check_array(X.reshape(X.shape[0], -1), ensure_min_samples=1)
    if feature_dim is not None and X.shape[2] != feature_dim:
        raise ConfigError(f"feature dimension {X.shape[2]} does not match the fitted value {feature_dim}")
    return X


def check_flat_batch(X, n_features: int | None = None) -> np.ndarray:
    """2-D ``[n, D]`` view for models that see flattened matrices."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X.reshape(X.shape[0], -1)
    X = check_array(X, ensure_min_samples=1)
    if n_features is not None and X.shape[1] != n_features:
        raise ConfigError(f"expected {n_features} features, got {X.shape[1]}")
    return X
