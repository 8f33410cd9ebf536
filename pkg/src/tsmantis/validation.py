"""Input validation shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_series(X, min_length: int = 2) -> np.ndarray:
    """Validate a batch of series and return it as ``(n, d, t)`` float64.

    A 2-D input is read as ``n`` univariate series of length ``t``.
    """
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise ValueError(f"expected (n, t) or (n, d, t) input, got shape {X.shape}")
    if X.shape[-1] < min_length:
        raise ValueError(f"series must have at least {min_length} time steps, got {X.shape[-1]}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y


def check_probabilities(probs, atol: float = 1e-6) -> np.ndarray:
    probs = check_array(probs, dtype=np.float64)
    if np.any(probs < -atol) or not np.allclose(probs.sum(axis=1), 1.0, atol=atol):
        raise ValueError("rows of probs must lie on the probability simplex")
    return probs
