"""Input conditioning: length resizing, instance z-scoring, differentials.

All functions accept a single series ``(t,)``, a multichannel series
``(d, t)`` or a batch ``(n, d, t)`` and operate along the last axis.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_series


def resize_linear(x, target_length: int = 512) -> np.ndarray:
    """Linearly interpolate the last axis onto ``target_length`` points.

    Endpoints map to endpoints, so both are reproduced exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[-1]
    if t < 2:
        raise ValueError(f"series must have at least 2 time steps, got {t}")
    if target_length < 2:
        raise ValueError(f"target_length must be >= 2, got {target_length}")
    if t == target_length:
        return x.copy()
    pos = np.arange(target_length) * ((t - 1) / (target_length - 1))
    left = np.minimum(np.floor(pos).astype(np.int64), t - 2)
    frac = pos - left
    lo = x[..., left]
    hi = x[..., left + 1]
    out = lo + (hi - lo) * frac
    out[..., 0] = x[..., 0]
    out[..., -1] = x[..., -1]
    return out


def instance_norm(x, eps: float = 1e-5) -> np.ndarray:
    """``(x - mean) / (std + eps)`` per channel, population std over time."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / (sd + eps)


def differential(x) -> np.ndarray:
    """First difference along time, left-padded with one zero to keep the length."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError(f"series must have at least 2 time steps, got {x.shape[-1]}")
    out = np.zeros_like(x)
    out[..., 1:] = np.diff(x, axis=-1)
    return out


class SeriesResizer(TransformerMixin, BaseEstimator):
    """Resize every channel of every sample to ``target_length``."""

    def __init__(self, target_length: int = 512):
        self.target_length = target_length

    def fit(self, X, y=None):
        check_series(X)
        return self

    def transform(self, X):
        return resize_linear(check_series(X), self.target_length)


class InstanceNormalizer(TransformerMixin, BaseEstimator):
    """Stateless per-sample, per-channel z-scoring."""

    def __init__(self, eps: float = 1e-5):
        self.eps = eps

    def fit(self, X, y=None):
        check_series(X)
        return self

    def transform(self, X):
        return instance_norm(check_series(X), self.eps)
