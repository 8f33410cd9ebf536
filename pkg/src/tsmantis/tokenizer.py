"""Token generator: one resized channel -> ``num_patches`` tokens of width ``dim``.

Three feature streams are computed per patch and fused:

* convolutional features of the instance-normalised series,
* convolutional features of its first differential,
* an encoding of the raw (pre-normalisation) patch mean and std.

The statistic encoder is a stand-in: every scalar is squashed by ``tanh``
at 16 geometric scales and the expansion is projected linearly.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .autograd import (DimensionError, Linear, LayerNorm, Module, Tensor, as_tensor,
                       concat, conv1d, matmul, sqrt, tanh)

SCALAR_SCALES = 2.0 ** (np.arange(16) - 8)


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def adaptive_pool_matrix(length: int, bins: int) -> np.ndarray:
    """``(length, bins)`` averaging matrix; column p averages segment p.

    Segment p spans ``[floor(p*L/bins), ceil((p+1)*L/bins))`` so the segments
    are equal whenever ``bins`` divides ``length``.
    """
    if length < bins:
        raise DimensionError(f"cannot pool {length} positions into {bins} patches")
    P = np.zeros((length, bins))
    for p in range(bins):
        start = (p * length) // bins
        stop = -((-(p + 1) * length) // bins)
        P[start:stop, p] = 1.0 / (stop - start)
    return P


def conv_patchify(x, kernels: Tensor, bias: Optional[Tensor], num_patches: int = 32,
                  stride: int = 8, padding: int = 4) -> Tensor:
    """Single-input-channel convolution followed by adaptive mean pooling.

    ``x`` is ``(batch, L)`` or ``(L,)``; the result is ``(batch, num_patches, c_out)``
    (or ``(num_patches, c_out)`` for unbatched input).
    """
    x = as_tensor(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    batch, length = x.shape
    feats = conv1d(x.reshape(batch, 1, length), kernels, stride=stride, padding=padding)
    t_out = feats.shape[-1]
    pool = Tensor(adaptive_pool_matrix(t_out, num_patches).T, dtype=feats.dtype)
    out = matmul(pool, feats.transpose(0, 2, 1))
    if bias is not None:
        out = out + bias
    return out.reshape(num_patches, -1) if squeeze else out


def stat_patches(x, num_patches: int = 32) -> Tensor:
    """Population mean and std of ``num_patches`` contiguous windows: ``(..., num_patches, 2)``."""
    x = as_tensor(x)
    length = x.shape[-1]
    if length % num_patches:
        raise DimensionError(f"length {length} is not divisible into {num_patches} windows")
    windows = x.reshape(*x.shape[:-1], num_patches, length // num_patches)
    mu = windows.mean(axis=-1, keepdims=True)
    centered = windows - mu
    sd = sqrt((centered * centered).mean(axis=-1, keepdims=True))
    return concat([mu, sd], axis=-1)


def scalar_expand(stats: Tensor, scales: np.ndarray = SCALAR_SCALES) -> Tensor:
    """``tanh(v / scale)`` for every scalar and scale, flattened per patch."""
    stats = as_tensor(stats)
    inv = Tensor(1.0 / np.asarray(scales), dtype=stats.dtype)
    expanded = tanh(stats.reshape(*stats.shape, 1) * inv)
    return expanded.reshape(*stats.shape[:-1], stats.shape[-1] * len(scales))


def scalar_encode(stats, projection: Linear, scales: np.ndarray = SCALAR_SCALES) -> Tensor:
    return projection(scalar_expand(stats, scales))


def instance_norm_t(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Differentiable counterpart of :func:`tsmantis.preprocessing.instance_norm`."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    sd = sqrt((centered * centered).mean(axis=-1, keepdims=True))
    return centered / (sd + eps)


def differential_t(x: Tensor) -> Tensor:
    zeros = Tensor(np.zeros(x.shape[:-1] + (1,)), dtype=x.dtype)
    return concat([zeros, x[..., 1:] - x[..., :-1]], axis=-1)


class TokenGenerator(Module):
    def __init__(self, dim: int = 256, num_patches: int = 32, stat_dim: int = 64,
                 kernel_size: int = 16, stride: int = 8, padding: int = 4,
                 use_differential: bool = True, num_scales: int = 16, norm_eps: float = 1e-5,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self._num_patches = num_patches
        self._stride = stride
        self._padding = padding
        self._norm_eps = norm_eps
        self._use_differential = use_differential
        self._scales = 2.0 ** (np.arange(num_scales) - num_scales // 2)
        bound = 1.0 / np.sqrt(kernel_size)
        self.series_kernels = Tensor(rng.uniform(-bound, bound, (dim, 1, kernel_size)),
                                     requires_grad=True)
        self.series_bias = Tensor(np.zeros(dim), requires_grad=True)
        if use_differential:
            self.diff_kernels = Tensor(rng.uniform(-bound, bound, (dim, 1, kernel_size)),
                                       requires_grad=True)
            self.diff_bias = Tensor(np.zeros(dim), requires_grad=True)
        self.scalar_proj = Linear(2 * num_scales, stat_dim, rng)
        self.fusion = Linear(self.fusion_width(dim, stat_dim, use_differential), dim, rng)
        self.fusion_norm = LayerNorm(dim)

    @staticmethod
    def fusion_width(dim: int, stat_dim: int, use_differential: bool) -> int:
        return dim * (2 if use_differential else 1) + stat_dim

    @property
    def use_differential(self) -> bool:
        return self._use_differential

    def features(self, x: Tensor) -> Tensor:
        """Concatenated pre-projection features, ``(batch, num_patches, fusion_width)``."""
        x = as_tensor(x)
        if x.ndim != 2:
            raise DimensionError(f"token generator expects (batch, length), got {x.shape}")
        if x.shape[1] % self._num_patches:
            raise DimensionError(
                f"length {x.shape[1]} is not a multiple of {self._num_patches} patches")
        normed = instance_norm_t(x, self._norm_eps)
        parts = [conv_patchify(normed, self.series_kernels, self.series_bias,
                               self._num_patches, self._stride, self._padding)]
        if self._use_differential:
            parts.append(conv_patchify(differential_t(normed), self.diff_kernels,
                                       self.diff_bias, self._num_patches, self._stride,
                                       self._padding))
        stats = stat_patches(x, self._num_patches)
        parts.append(scalar_encode(stats, self.scalar_proj, self._scales))
        return concat(parts, axis=-1)

    def fuse(self, features: Tensor) -> Tensor:
        expected = self.fusion.weight.shape[0]
        if features.shape[-1] != expected:
            raise DimensionError(f"fusion input width {features.shape[-1]} != {expected}")
        return self.fusion_norm(self.fusion(features))

    def __call__(self, x) -> Tensor:
        return self.fuse(self.features(x))
