"""Channel adapters ``R^d -> R^d_new`` applied identically at every time step.

The unsupervised adapters are fitted on the ``(n * t, d)`` matrix whose rows
are the channel vectors of every (sample, time step) pair.  Singular vectors
come from a symmetric eigendecomposition of the ``d x d`` Gram matrix, which
is accumulated without materialising the tall design.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autograd import DimensionError, Module, Tensor, matmul
from .validation import check_series

KINDS = ("pca", "svd", "rand_proj", "var_selector", "lcomb")
ALIASES = {"randproj": "rand_proj", "varsel": "var_selector"}
MAX_CHANNELS = 10
VAR_EPS = 1e-12


def canonical_kind(kind: str) -> str:
    kind = ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ValueError(f"unknown adapter kind {kind!r}; choose from {KINDS}")
    return kind


def default_d_new(d: int, kind: str = "pca") -> int:
    return MAX_CHANNELS if canonical_kind(kind) == "lcomb" else min(d, MAX_CHANNELS)


def reshape_for_fit(X) -> np.ndarray:
    """Stack ``(n, d, t)`` into ``(n * t, d)``; row ``i * t + s`` is sample i at step s."""
    X = np.asarray(X)
    if X.ndim != 3:
        raise ValueError(f"expected a uniform (n, d, t) array, got shape {X.shape}; "
                         "resize ragged series first")
    n, d, t = X.shape
    return X.transpose(0, 2, 1).reshape(n * t, d)


def unreshape(design: np.ndarray, n: int, t: int) -> np.ndarray:
    return design.reshape(n, t, -1).transpose(0, 2, 1)


def _sign_normalize(W: np.ndarray) -> np.ndarray:
    """Flip each row so that its largest-magnitude entry is positive."""
    W = W.copy()
    pivots = np.argmax(np.abs(W), axis=1)
    signs = np.sign(W[np.arange(len(W)), pivots])
    signs[signs == 0] = 1.0
    return W * signs[:, None]


def _top_eigvecs(gram: np.ndarray, d_new: int) -> np.ndarray:
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(-vals, kind="stable")[:d_new]
    return _sign_normalize(vecs[:, order].T)


def _check_d_new(d: int, d_new: int) -> None:
    if not 1 <= d_new <= d:
        raise ValueError(f"d_new must lie in [1, {d}], got {d_new}")


def _gram_from_series(X: np.ndarray, center: bool):
    n, d, t = X.shape
    gram = np.einsum("ndt,net->de", X, X)
    mean = X.sum(axis=(0, 2)) / (n * t)
    if center:
        gram = gram - (n * t) * np.outer(mean, mean)
    return gram, mean


class ChannelAdapter(TransformerMixin, BaseEstimator):
    """Unsupervised channel reduction fitted on reshaped ``(n*t, d)`` data.

    Parameters
    ----------
    kind : {'pca', 'svd', 'rand_proj', 'var_selector'}
    d_new : int, optional
        Output channels; defaults to ``min(d, 10)``.
    random_state : int, optional
        Seed for ``rand_proj``.

    Attributes
    ----------
    components_ : ndarray of shape (d_new, d)
        Rotation applied per time step (selection rows for ``var_selector``).
    mean_ : ndarray of shape (d,) or None
        Column means subtracted before projection (``pca`` only).
    indices_ : ndarray or None
        Selected channels for ``var_selector``, by descending variance.
    """

    def __init__(self, kind: str = "pca", d_new: Optional[int] = None,
                 random_state: Optional[int] = None):
        self.kind = kind
        self.d_new = d_new
        self.random_state = random_state

    def fit(self, X, y=None):
        # labels are accepted for pipeline compatibility and never read
        X = check_series(X, min_length=1)
        kind = canonical_kind(self.kind)
        if kind == "lcomb":
            raise ValueError("lcomb is trained jointly with the encoder; use LinearCombiner")
        d = X.shape[1]
        d_new = self.d_new if self.d_new is not None else default_d_new(d, kind)
        _check_d_new(d, d_new)
        self.mean_ = None
        self.indices_ = None
        if kind in ("pca", "svd"):
            gram, mean = _gram_from_series(X, center=kind == "pca")
            self.components_ = _top_eigvecs(gram, d_new)
            if kind == "pca":
                self.mean_ = mean
        elif kind == "rand_proj":
            self.components_ = _random_rotation(d, d_new, self.random_state)
        else:
            design_var = X.var(axis=(0, 2))
            self._set_selection(_top_variance(design_var, d_new), d)
        self.n_channels_in_ = d
        self.d_new_ = d_new
        return self

    def _set_selection(self, indices: np.ndarray, d: int) -> None:
        self.indices_ = indices
        self.components_ = np.eye(d)[indices]

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_series(X, min_length=1)
        return apply_adapter(self, X)

    def inverse_transform(self, Z):
        """Map back to the original channels with ``W^T`` (adding the mean for pca)."""
        check_is_fitted(self, "components_")
        Z = check_series(Z, min_length=1)
        out = np.einsum("ed,net->ndt", self.components_, Z)
        if self.mean_ is not None:
            out = out + self.mean_[None, :, None]
        return out


def _random_rotation(d: int, d_new: int, seed) -> np.ndarray:
    _check_d_new(d, d_new)
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(d_new), (d_new, d))


def _top_variance(variances: np.ndarray, d_new: int) -> np.ndarray:
    # stable sort on -variance keeps the lower index first among ties
    return np.argsort(-np.asarray(variances), kind="stable")[:d_new]


def _fitted(kind: str, d: int, d_new: int, components: np.ndarray,
            mean: Optional[np.ndarray] = None, indices=None) -> ChannelAdapter:
    adapter = ChannelAdapter(kind=kind, d_new=d_new)
    adapter.components_ = components
    adapter.mean_ = mean
    adapter.indices_ = indices
    adapter.n_channels_in_ = d
    adapter.d_new_ = d_new
    return adapter


def fit_pca(design, d_new: int) -> ChannelAdapter:
    """Top right singular vectors of the column-centred design."""
    design = np.asarray(design, dtype=np.float64)
    if len(design) < 2:
        raise ValueError("PCA needs at least two rows")
    _check_d_new(design.shape[1], d_new)
    mean = design.mean(axis=0)
    centered = design - mean
    return _fitted("pca", design.shape[1], d_new, _top_eigvecs(centered.T @ centered, d_new), mean)


def fit_svd(design, d_new: int) -> ChannelAdapter:
    """Like :func:`fit_pca` on the raw (uncentred) design."""
    design = np.asarray(design, dtype=np.float64)
    if len(design) < 2:
        raise ValueError("SVD needs at least two rows")
    _check_d_new(design.shape[1], d_new)
    return _fitted("svd", design.shape[1], d_new, _top_eigvecs(design.T @ design, d_new))


def fit_rand_proj(d: int, d_new: int, seed: Optional[int] = None) -> ChannelAdapter:
    return _fitted("rand_proj", d, d_new, _random_rotation(d, d_new, seed))


def fit_var_selector(design, d_new: int) -> ChannelAdapter:
    design = np.asarray(design, dtype=np.float64)
    d = design.shape[1]
    _check_d_new(d, d_new)
    indices = _top_variance(design.var(axis=0), d_new)
    return _fitted("var_selector", d, d_new, np.eye(d)[indices], indices=indices)


def apply_adapter(adapter, series) -> np.ndarray:
    """Apply a fitted adapter to ``(d, t)`` or ``(n, d, t)`` data; time is untouched."""
    series = np.asarray(series, dtype=np.float64)
    squeeze = series.ndim == 2
    X = series[None] if squeeze else series
    if isinstance(adapter, LinearCombiner):
        W, mean, indices = adapter.weight.data.astype(np.float64), None, None
    else:
        W, mean, indices = adapter.components_, adapter.mean_, adapter.indices_
    if X.shape[1] != W.shape[1]:
        raise DimensionError(f"adapter expects {W.shape[1]} channels, got {X.shape[1]}")
    if indices is not None:
        out = X[:, indices, :]
    else:
        if mean is not None:
            X = X - mean[None, :, None]
        out = np.einsum("ed,ndt->net", W, X)
    return out[0] if squeeze else out


class LinearCombiner(Module):
    """Learnable ``W`` (d_new x d) trained jointly with the encoder and head."""

    kind = "lcomb"

    def __init__(self, d: int, d_new: int = MAX_CHANNELS, seed: int = 0,
                 weight: Optional[np.ndarray] = None):
        if weight is None:
            rng = np.random.default_rng(seed)
            weight = rng.normal(0.0, 1.0 / np.sqrt(d), (d_new, d))
        self.weight = Tensor(weight, requires_grad=True)

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    @property
    def d_new(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        """``(batch, d, t)`` -> ``(batch, d_new, t)``."""
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.weight.dtype)
        if x.shape[-2] != self.d:
            raise DimensionError(f"combiner expects {self.d} channels, got {x.shape[-2]}")
        return matmul(self.weight, x)

    def transform(self, X) -> np.ndarray:
        return apply_adapter(self, check_series(X, min_length=1))


def lcomb_forward(weight: Tensor, series) -> Tensor:
    if not isinstance(series, Tensor):
        series = Tensor(series, dtype=weight.dtype)
    return matmul(weight, series)


def make_adapter(kind: str, d_new: Optional[int] = None, seed: Optional[int] = None):
    """Unfitted adapter for ``kind``; ``None`` and ``'none'`` mean no adapter."""
    if kind in (None, "none"):
        return None
    kind = canonical_kind(kind)
    if kind == "lcomb":
        raise ValueError("lcomb adapters are built from the channel count; use LinearCombiner")
    return ChannelAdapter(kind=kind, d_new=d_new, random_state=seed)
